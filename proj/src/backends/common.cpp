#include <algorithm>
#include <cmath>
#include <cstdlib>

#include "kbc/backends.hpp"
#include "kbc/error.hpp"

namespace kbc {

using nlohmann::json;

std::int64_t estimate_prompt_tokens(const ChatRequest& req) {
    std::size_t chars = 0;
    for (const auto& m : req.messages) {
        for (const auto& p : m.parts) {
            if (const auto* t = std::get_if<TextPart>(&p)) chars += t->text.size();
        }
    }
    return static_cast<std::int64_t>((chars + 3) / 4);
}

void validate(const ChatRequest& req, std::int64_t context_window) {
    if (req.model_id.empty()) throw Error(Errc::InvalidRequest, "model id is empty");
    if (req.messages.empty()) throw Error(Errc::InvalidRequest, "request has no messages");
    if (!(req.temperature >= 0.0 && req.temperature <= 2.0))
        throw Error(Errc::InvalidRequest, "temperature must lie in [0, 2]");
    if (req.max_tokens < 1) throw Error(Errc::InvalidRequest, "max_tokens must be >= 1");
    std::size_t images = 0;
    for (const auto& m : req.messages) {
        validate(m);
        images += m.image_count();
    }
    if (images > kMaxImagesPerRequest)
        throw Error(Errc::InvalidRequest, "at most 4 image parts per request, got " + std::to_string(images));
    const std::int64_t need = estimate_prompt_tokens(req) + req.max_tokens;
    if (need > context_window)
        throw Error(Errc::ContextOverflow, "estimated " + std::to_string(need) + " tokens exceeds window of " +
                                              std::to_string(context_window));
}

json canonical_json(const ChatRequest& req) {
    json j{{"model", req.model_id},
           {"messages", to_digest_json(req.messages)},
           {"temperature", req.temperature},
           {"max_tokens", req.max_tokens}};
    j["seed"] = req.seed ? json(*req.seed) : json(nullptr);
    return j;
}

json to_openai_body(const ChatRequest& req) {
    json messages = json::array();
    for (const auto& m : req.messages) {
        json content;
        if (m.image_count() == 0) {
            content = m.joined_text();
        } else {
            content = json::array();
            for (const auto& p : m.parts) {
                if (const auto* t = std::get_if<TextPart>(&p)) {
                    content.push_back({{"type", "text"}, {"text", t->text}});
                } else {
                    const auto& img = std::get<ImagePart>(p);
                    const std::string url =
                        "data:" + std::string(mime_type(img.format)) + ";base64," + base64_encode(img.bytes);
                    content.push_back({{"type", "image_url"}, {"image_url", {{"url", url}}}});
                }
            }
        }
        messages.push_back({{"role", role_name(m.role)}, {"content", std::move(content)}});
    }
    json body{{"model", req.model_id},
              {"messages", std::move(messages)},
              {"temperature", req.temperature},
              {"max_tokens", req.max_tokens},
              {"stream", false}};
    if (req.seed) body["seed"] = *req.seed;
    return body;
}

std::string_view embed_model_name(EmbedModel m) noexcept { return m == EmbedModel::Clip ? "clip" : "blip"; }

EmbedModel parse_embed_model(std::string_view name) {
    if (name == "clip") return EmbedModel::Clip;
    if (name == "blip") return EmbedModel::Blip;
    throw Error(Errc::ParseError, "unknown embedding model tag '" + std::string(name) + "'");
}

void normalize_in_place(std::vector<double>& v) {
    if (v.empty()) throw Error(Errc::InvalidRequest, "embedding is empty");
    double sq = 0.0;
    for (double x : v) {
        if (!std::isfinite(x)) throw Error(Errc::InvalidRequest, "embedding has non-finite entries");
        sq += x * x;
    }
    if (sq == 0.0) throw Error(Errc::InvalidRequest, "embedding has zero norm");
    const double inv = 1.0 / std::sqrt(sq);
    for (double& x : v) x *= inv;
}

std::chrono::milliseconds RetryPolicy::delay_before(int attempt) const {
    // attempt is 1-based; the first attempt has no delay.
    if (attempt <= 1) return std::chrono::milliseconds{0};
    double ms = static_cast<double>(initial_delay.count()) * std::pow(multiplier, attempt - 2);
    ms = std::min(ms, static_cast<double>(max_delay.count()));
    return std::chrono::milliseconds{static_cast<std::int64_t>(ms)};
}

bool is_transient_status(int status) noexcept {
    return status == 0 || status == 408 || status == 429 || (status >= 500 && status <= 599);
}

BackendConfig BackendConfig::from_json(const json& j) {
    BackendConfig c;
    c.chat_url = j.value("chat_url", c.chat_url);
    c.embed_url = j.value("embed_url", c.embed_url);
    c.image_url = j.value("image_url", c.image_url);
    c.api_key = j.value("api_key", c.api_key);
    c.chat_model = j.value("chat_model", c.chat_model);
    c.timeout_s = j.value("timeout_s", c.timeout_s);
    c.context_window = j.value("context_window", c.context_window);
    c.temperature = j.value("temperature", c.temperature);
    c.max_tokens = j.value("max_tokens", c.max_tokens);
    return c;
}

json BackendConfig::to_json() const {
    // The API key is deliberately left out of persisted snapshots.
    return json{{"chat_url", chat_url},       {"embed_url", embed_url},   {"image_url", image_url},
                {"chat_model", chat_model},   {"timeout_s", timeout_s},   {"context_window", context_window},
                {"temperature", temperature}, {"max_tokens", max_tokens}};
}

void BackendConfig::apply_env() {
    auto env = [](const char* name, std::string& slot) {
        if (const char* v = std::getenv(name); v && *v) slot = v;
    };
    env("KB_CHAT_URL", chat_url);
    env("KB_EMBED_URL", embed_url);
    env("KB_IMAGE_URL", image_url);
    env("KB_API_KEY", api_key);
}

BackendSet make_backends(const BackendConfig& cfg, const std::filesystem::path& cache_dir, RetryPolicy retry) {
    BackendSet set;
    auto endpoint = [&](const std::string& url) {
        return HttpEndpoint{url, cfg.api_key, std::chrono::seconds{cfg.timeout_s}};
    };
    if (cfg.chat_url == kMockUrl) set.chat_impl = std::make_unique<MockChatBackend>();
    else set.chat_impl = std::make_unique<HttpChatBackend>(endpoint(cfg.chat_url), retry, cfg.context_window);
    if (cfg.embed_url == kMockUrl) set.embed_impl = std::make_unique<MockEmbeddingBackend>();
    else set.embed_impl = std::make_unique<HttpEmbeddingBackend>(endpoint(cfg.embed_url), retry);
    if (cfg.image_url == kMockUrl) set.image_impl = std::make_unique<MockImageBackend>();
    else set.image_impl = std::make_unique<HttpImageBackend>(endpoint(cfg.image_url), retry);

    if (!cache_dir.empty()) {
        set.cache = std::make_unique<FileCacheStore>(cache_dir);
        set.chat_cached = std::make_unique<CachingChatBackend>(*set.chat_impl, *set.cache);
        set.embed_cached = std::make_unique<CachingEmbeddingBackend>(*set.embed_impl, *set.cache);
        set.image_cached = std::make_unique<CachingImageBackend>(*set.image_impl, *set.cache);
    }
    return set;
}

}  // namespace kbc
