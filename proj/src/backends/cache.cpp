#include <fstream>
#include <sstream>

#include "kbc/backends.hpp"
#include "kbc/error.hpp"

namespace kbc {

using nlohmann::json;
namespace fs = std::filesystem;

std::optional<std::string> MemoryCacheStore::get(const std::string& key) {
    std::lock_guard lock(mu_);
    auto it = entries_.find(key);
    if (it == entries_.end()) return std::nullopt;
    return it->second;
}

void MemoryCacheStore::put(const std::string& key, const std::string& value) {
    std::lock_guard lock(mu_);
    entries_[key] = value;
}

FileCacheStore::FileCacheStore(fs::path root) : root_(std::move(root)) {}

fs::path FileCacheStore::path_for(const std::string& key) const {
    if (key.size() < 4) throw Error(Errc::Precondition, "cache key too short");
    return root_ / key.substr(0, 2) / key.substr(2, 2) / key;
}

std::optional<std::string> FileCacheStore::get(const std::string& key) {
    std::ifstream in(path_for(key), std::ios::binary);
    if (!in) return std::nullopt;
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

void FileCacheStore::put(const std::string& key, const std::string& value) {
    const fs::path target = path_for(key);
    std::error_code ec;
    fs::create_directories(target.parent_path(), ec);
    if (ec) throw Error(Errc::IoError, "cannot create cache directory " + target.parent_path().string());
    // write-then-rename so readers never observe a partial entry
    const fs::path tmp = target.string() + ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw Error(Errc::IoError, "cannot write " + tmp.string());
        out << value;
    }
    fs::rename(tmp, target, ec);
    if (ec) throw Error(Errc::IoError, "cannot move cache entry into place: " + ec.message());
}

std::unique_lock<std::mutex> KeyLocks::lock(const std::string& key) {
    std::size_t h = 0;
    for (std::size_t i = 0; i < 8 && i < key.size(); ++i) h = h * 31 + static_cast<unsigned char>(key[i]);
    return std::unique_lock(stripes_[h % stripes_.size()]);
}

std::string chat_cache_key(const std::string& backend_id, const ChatRequest& req) {
    return sha256_hex("chat\n" + backend_id + "\n" + req.model_id + "\n" + canonical_json(req).dump());
}

std::string embed_cache_key(const std::string& backend_id, const Payload& payload, EmbedModel model) {
    return sha256_hex("embed\n" + backend_id + "\n" + std::string(embed_model_name(model)) + "\n" +
                      std::string(modality_name(payload.modality)) + "\n" + sha256_hex(payload.bytes));
}

std::string image_cache_key(const std::string& backend_id, const std::string& prompt,
                            const std::string& generator_id, std::int64_t seed) {
    return sha256_hex("image\n" + backend_id + "\n" + generator_id + "\n" + std::to_string(seed) + "\n" + prompt);
}

ChatResponse CachingChatBackend::chat(const ChatRequest& req) {
    const std::string key = chat_cache_key(inner_.backend_id(), req);
    auto guard = locks_.lock(key);
    if (auto hit = store_.get(key)) {
        const json j = json::parse(*hit, nullptr, false);
        if (!j.is_discarded()) {
            ++stats_.hits;
            return ChatResponse{j.at("text").get<std::string>(), j.value("prompt_tokens", std::int64_t{0}),
                                j.value("completion_tokens", std::int64_t{0}), 0};
        }
    }
    ++stats_.misses;
    ChatResponse r = inner_.chat(req);
    store_.put(key, json{{"text", r.text}, {"prompt_tokens", r.prompt_tokens}, {"completion_tokens", r.completion_tokens}}.dump());
    return r;
}

EmbeddingVector CachingEmbeddingBackend::embed(const Payload& payload, EmbedModel model) {
    const std::string key = embed_cache_key(inner_.backend_id(), payload, model);
    auto guard = locks_.lock(key);
    if (auto hit = store_.get(key)) {
        const json j = json::parse(*hit, nullptr, false);
        if (!j.is_discarded()) {
            ++stats_.hits;
            // values are stored as exact binary64 round-trips
            return EmbeddingVector{model, payload.modality, j.at("values").get<std::vector<double>>()};
        }
    }
    ++stats_.misses;
    EmbeddingVector v = inner_.embed(payload, model);
    store_.put(key, json{{"values", v.values}, {"dim", v.dim()}}.dump());
    return v;
}

ImageArtifact CachingImageBackend::generate_image(const std::string& prompt, const std::string& generator_id,
                                                  std::int64_t seed) {
    const std::string key = image_cache_key(inner_.backend_id(), prompt, generator_id, seed);
    auto guard = locks_.lock(key);
    if (auto hit = store_.get(key)) {
        const json j = json::parse(*hit, nullptr, false);
        if (!j.is_discarded()) {
            ++stats_.hits;
            return ImageArtifact{base64_decode(j.at("b64_bytes").get<std::string>()),
                                 parse_image_format(j.at("format").get<std::string>()), prompt, generator_id, seed};
        }
    }
    ++stats_.misses;
    ImageArtifact a = inner_.generate_image(prompt, generator_id, seed);
    store_.put(key, json{{"format", image_format_name(a.format)}, {"b64_bytes", base64_encode(a.bytes)}}.dump());
    return a;
}

}  // namespace kbc
