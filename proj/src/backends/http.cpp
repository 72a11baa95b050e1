#include <thread>

#include "httplib.h"
#include "kbc/backends.hpp"
#include "kbc/error.hpp"

namespace kbc {

using nlohmann::json;

namespace {

struct HttpResult {
    int status = 0;  // 0: no response
    std::string body;
    std::string error;
    int attempts = 0;
};

// "http://host:8000/api" -> {"http://host:8000", "/api"}
std::pair<std::string, std::string> split_url(const std::string& url) {
    const auto scheme = url.find("://");
    if (scheme == std::string::npos) throw Error(Errc::InvalidRequest, "endpoint URL needs a scheme: " + url);
    const auto path = url.find('/', scheme + 3);
    if (path == std::string::npos) return {url, ""};
    std::string prefix = url.substr(path);
    while (!prefix.empty() && prefix.back() == '/') prefix.pop_back();
    return {url.substr(0, path), prefix};
}

HttpResult post_once(const HttpEndpoint& ep, const std::string& path, const std::string& body) {
    const auto [origin, prefix] = split_url(ep.base_url);
    httplib::Client client(origin);
    client.set_connection_timeout(ep.timeout);
    client.set_read_timeout(ep.timeout);
    client.set_write_timeout(ep.timeout);
    httplib::Headers headers;
    if (!ep.api_key.empty()) headers.emplace("Authorization", "Bearer " + ep.api_key);
    HttpResult out;
    auto res = client.Post(prefix + path, headers, body, "application/json");
    if (!res) {
        out.error = httplib::to_string(res.error());
        return out;
    }
    out.status = res->status;
    out.body = res->body;
    return out;
}

HttpResult post_with_retry(const HttpEndpoint& ep, const RetryPolicy& retry, const std::string& path,
                           const json& body) {
    const std::string payload = body.dump();
    HttpResult last;
    const int attempts = std::max(1, retry.max_attempts);
    for (int attempt = 1; attempt <= attempts; ++attempt) {
        if (auto d = retry.delay_before(attempt); d.count() > 0) {
            if (retry.sleep) retry.sleep(d);
            else std::this_thread::sleep_for(d);
        }
        last = post_once(ep, path, payload);
        last.attempts = attempt;
        if (last.status == 200 || !is_transient_status(last.status)) break;
    }
    return last;
}

[[noreturn]] void throw_status(const HttpResult& r, const std::string& what) {
    if (r.status == 429)
        throw Error(Errc::RateLimited, what + ": rate limited after " + std::to_string(r.attempts) + " attempts")
            .with_status(429);
    if (r.status == 0) throw Error(Errc::Transport, what + ": " + r.error).with_status(0);
    throw Error(Errc::Transport, what + ": HTTP " + std::to_string(r.status)).with_status(r.status);
}

json parse_body(const HttpResult& r, const std::string& what) {
    json j = json::parse(r.body, nullptr, false);
    if (j.is_discarded() || !j.is_object()) throw Error(Errc::Transport, what + ": malformed JSON response").with_status(r.status);
    return j;
}

}  // namespace

HttpChatBackend::HttpChatBackend(HttpEndpoint endpoint, RetryPolicy retry, std::int64_t context_window)
    : endpoint_(std::move(endpoint)), retry_(std::move(retry)), context_window_(context_window) {}

std::string HttpChatBackend::backend_id() const { return "http-chat:" + endpoint_.base_url; }

ChatResponse HttpChatBackend::chat(const ChatRequest& req) {
    validate(req, context_window_);
    const HttpResult r = post_with_retry(endpoint_, retry_, "/v1/chat/completions", to_openai_body(req));
    if (r.status != 200) throw_status(r, "chat");
    const json j = parse_body(r, "chat");
    ChatResponse out;
    out.attempts = r.attempts;
    try {
        const json& content = j.at("choices").at(0).at("message").at("content");
        if (content.is_string()) {
            out.text = content.get<std::string>();
        } else {
            for (const auto& part : content) {
                if (part.value("type", "") == "text") out.text += part.value("text", "");
            }
        }
    } catch (const json::exception& e) {
        throw Error(Errc::Transport, std::string("chat: unexpected response shape: ") + e.what()).with_status(200);
    }
    if (auto u = j.find("usage"); u != j.end() && u->is_object()) {
        out.prompt_tokens = u->value("prompt_tokens", std::int64_t{0});
        out.completion_tokens = u->value("completion_tokens", std::int64_t{0});
    }
    return out;
}

HttpEmbeddingBackend::HttpEmbeddingBackend(HttpEndpoint endpoint, RetryPolicy retry)
    : endpoint_(std::move(endpoint)), retry_(std::move(retry)) {}

std::string HttpEmbeddingBackend::backend_id() const { return "http-embed:" + endpoint_.base_url; }

EmbeddingVector HttpEmbeddingBackend::embed(const Payload& payload, EmbedModel model) {
    if (payload.bytes.empty()) throw Error(Errc::Precondition, "embedding payload is empty");
    json body{{"model_tag", embed_model_name(model)},
              {"modality_tag", modality_name(payload.modality)},
              {"input", payload.modality == Modality::Text ? payload.bytes : base64_encode(payload.bytes)}};
    const HttpResult r = post_with_retry(endpoint_, retry_, "/v1/embeddings", body);
    if (r.status == 400 || r.status == 422)
        throw Error(Errc::UnsupportedModality, std::string(embed_model_name(model)) + "/" +
                                                   std::string(modality_name(payload.modality)))
            .with_status(r.status);
    if (r.status != 200) throw_status(r, "embeddings");
    const json j = parse_body(r, "embeddings");
    EmbeddingVector out{model, payload.modality, {}};
    try {
        out.values = j.at("values").get<std::vector<double>>();
        if (j.contains("dim") && j.at("dim").get<std::size_t>() != out.values.size())
            throw Error(Errc::Transport, "embeddings: dim does not match values").with_status(200);
    } catch (const json::exception& e) {
        throw Error(Errc::Transport, std::string("embeddings: unexpected response shape: ") + e.what()).with_status(200);
    }
    try {
        normalize_in_place(out.values);
    } catch (const Error& e) {
        throw Error(Errc::Transport, "embeddings: " + e.detail()).with_status(200);
    }
    return out;
}

HttpImageBackend::HttpImageBackend(HttpEndpoint endpoint, RetryPolicy retry)
    : endpoint_(std::move(endpoint)), retry_(std::move(retry)) {}

std::string HttpImageBackend::backend_id() const { return "http-image:" + endpoint_.base_url; }

ImageArtifact HttpImageBackend::generate_image(const std::string& prompt, const std::string& generator_id,
                                               std::int64_t seed) {
    if (prompt.empty()) throw Error(Errc::Precondition, "image prompt is empty");
    json body{{"prompt", prompt}, {"generator_id", generator_id}, {"seed", seed}};
    const HttpResult r = post_with_retry(endpoint_, retry_, "/v1/images", body);
    if (r.status == 400 || r.status == 404)
        throw Error(Errc::GeneratorUnavailable, generator_id).with_status(r.status);
    if (r.status != 200) throw_status(r, "images");
    const json j = parse_body(r, "images");
    ImageArtifact out;
    try {
        out.format = parse_image_format(j.at("format").get<std::string>());
        out.bytes = base64_decode(j.at("b64_bytes").get<std::string>());
    } catch (const json::exception& e) {
        throw Error(Errc::Transport, std::string("images: unexpected response shape: ") + e.what()).with_status(200);
    } catch (const Error& e) {
        throw Error(Errc::Transport, "images: " + e.detail()).with_status(200);
    }
    if (out.bytes.empty() || !image_decodable(out.bytes))
        throw Error(Errc::Transport, "images: payload is not a decodable image").with_status(200);
    out.prompt_used = prompt;
    out.generator_id = generator_id;
    out.seed = seed;
    return out;
}

}  // namespace kbc
