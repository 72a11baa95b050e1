#pragma once

#include <array>
#include <atomic>
#include <chrono>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "kbc/error.hpp"
#include "kbc/media.hpp"
#include "kbc/prompting.hpp"

namespace kbc {

// ---------------------------------------------------------------------------
// Wire types

struct ChatRequest {
    std::string model_id;
    std::vector<ChatMessage> messages;
    double temperature = 0.1;
    std::int64_t max_tokens = 512;
    std::optional<std::int64_t> seed;
};

inline constexpr std::size_t kMaxImagesPerRequest = 4;
inline constexpr std::int64_t kDefaultContextWindow = 8192;

/// Conservative prompt size estimate: ceil(text chars / 4).
std::int64_t estimate_prompt_tokens(const ChatRequest& req);

/// Throws InvalidRequest for out-of-range fields and ContextOverflow when the
/// estimated prompt plus max_tokens exceeds `context_window`.
void validate(const ChatRequest& req, std::int64_t context_window = kDefaultContextWindow);

/// Canonical serialization used for cache keys and transcripts. Images are
/// represented by their sha256.
nlohmann::json canonical_json(const ChatRequest& req);

/// OpenAI-compatible chat-completions request body (images as data URLs).
nlohmann::json to_openai_body(const ChatRequest& req);

struct ChatResponse {
    std::string text;
    std::int64_t prompt_tokens = 0;
    std::int64_t completion_tokens = 0;
    int attempts = 1;
};

enum class EmbedModel { Clip, Blip };
std::string_view embed_model_name(EmbedModel m) noexcept;
EmbedModel parse_embed_model(std::string_view name);

struct EmbeddingVector {
    EmbedModel model = EmbedModel::Clip;
    Modality modality = Modality::Text;
    std::vector<double> values;

    std::size_t dim() const noexcept { return values.size(); }
};

/// Scales to unit L2 norm. Throws InvalidRequest on empty, zero or
/// non-finite vectors.
void normalize_in_place(std::vector<double>& v);

struct ImageArtifact {
    std::string bytes;
    ImageFormat format = ImageFormat::Png;
    std::string prompt_used;
    std::string generator_id;
    std::int64_t seed = 0;
};

// ---------------------------------------------------------------------------
// Backend interfaces. Implementations are safe for concurrent use.

class ChatBackend {
public:
    virtual ~ChatBackend() = default;
    virtual std::string backend_id() const = 0;
    virtual ChatResponse chat(const ChatRequest& req) = 0;
};

class EmbeddingBackend {
public:
    virtual ~EmbeddingBackend() = default;
    virtual std::string backend_id() const = 0;
    virtual EmbeddingVector embed(const Payload& payload, EmbedModel model) = 0;
};

class ImageBackend {
public:
    virtual ~ImageBackend() = default;
    virtual std::string backend_id() const = 0;
    virtual ImageArtifact generate_image(const std::string& prompt, const std::string& generator_id,
                                         std::int64_t seed) = 0;
};

// ---------------------------------------------------------------------------
// Retry

struct RetryPolicy {
    int max_attempts = 3;
    std::chrono::milliseconds initial_delay{250};
    double multiplier = 2.0;
    std::chrono::milliseconds max_delay{4000};
    /// Injected so tests can run without sleeping.
    std::function<void(std::chrono::milliseconds)> sleep;

    std::chrono::milliseconds delay_before(int attempt) const;
};

/// Transport failures without a status, 408, 429 and 5xx are retried.
bool is_transient_status(int status) noexcept;

// ---------------------------------------------------------------------------
// HTTP clients

struct HttpEndpoint {
    std::string base_url;  // scheme://host[:port][/prefix]
    std::string api_key;
    std::chrono::seconds timeout{60};
};

class HttpChatBackend final : public ChatBackend {
public:
    HttpChatBackend(HttpEndpoint endpoint, RetryPolicy retry = {},
                    std::int64_t context_window = kDefaultContextWindow);
    std::string backend_id() const override;
    ChatResponse chat(const ChatRequest& req) override;

private:
    HttpEndpoint endpoint_;
    RetryPolicy retry_;
    std::int64_t context_window_;
};

class HttpEmbeddingBackend final : public EmbeddingBackend {
public:
    explicit HttpEmbeddingBackend(HttpEndpoint endpoint, RetryPolicy retry = {});
    std::string backend_id() const override;
    EmbeddingVector embed(const Payload& payload, EmbedModel model) override;

private:
    HttpEndpoint endpoint_;
    RetryPolicy retry_;
};

class HttpImageBackend final : public ImageBackend {
public:
    explicit HttpImageBackend(HttpEndpoint endpoint, RetryPolicy retry = {});
    std::string backend_id() const override;
    ImageArtifact generate_image(const std::string& prompt, const std::string& generator_id,
                                 std::int64_t seed) override;

private:
    HttpEndpoint endpoint_;
    RetryPolicy retry_;
};

// ---------------------------------------------------------------------------
// Mocks

/// Chat mock driven by a table of message-hash -> response plus an optional
/// fallback responder. Records every request it receives.
class ScriptedChatBackend final : public ChatBackend {
public:
    using Responder = std::function<std::string(const ChatRequest&, std::size_t call_index)>;

    ScriptedChatBackend() = default;
    explicit ScriptedChatBackend(Responder fallback) : fallback_(std::move(fallback)) {}

    /// sha256 over the digest JSON of the messages.
    static std::string message_hash(const std::vector<ChatMessage>& messages);

    void on_hash(std::string hash, std::string response);

    std::string backend_id() const override { return "scripted"; }
    ChatResponse chat(const ChatRequest& req) override;

    std::size_t calls() const;
    std::vector<ChatRequest> requests() const;

private:
    mutable std::mutex mu_;
    std::map<std::string, std::string> table_;
    Responder fallback_;
    std::vector<ChatRequest> requests_;
};

/// Deterministic stand-in for a multimodal chat model. It recognises the
/// shipped templates and answers each stage with a well-formed payload built
/// from the nouns it finds in the input (text, or the caption stored in a
/// PNG's tEXt chunk).
class MockChatBackend final : public ChatBackend {
public:
    std::string backend_id() const override { return "mock-chat"; }
    ChatResponse chat(const ChatRequest& req) override;
};

/// Bag-of-tokens embedding: every token maps to a seeded pseudo-random
/// vector, the sum is unit-normalized. Image payloads contribute their PNG
/// caption tokens, or a digest token when they carry none.
class MockEmbeddingBackend final : public EmbeddingBackend {
public:
    explicit MockEmbeddingBackend(std::size_t dim = 64) : dim_(dim) {}
    std::string backend_id() const override { return "mock-embed"; }
    EmbeddingVector embed(const Payload& payload, EmbedModel model) override;

    std::size_t calls() const { return calls_.load(); }

private:
    std::size_t dim_;
    std::atomic<std::size_t> calls_{0};
};

/// 64x64 solid-colour PNG whose colour hashes (prompt, seed); the prompt is
/// kept as the image caption.
class MockImageBackend final : public ImageBackend {
public:
    MockImageBackend();
    explicit MockImageBackend(std::vector<std::string> generators) : generators_(std::move(generators)) {}
    std::string backend_id() const override { return "mock-image"; }
    ImageArtifact generate_image(const std::string& prompt, const std::string& generator_id,
                                 std::int64_t seed) override;

    std::size_t calls() const { return calls_.load(); }

private:
    std::vector<std::string> generators_;
    std::atomic<std::size_t> calls_{0};
};

/// Lower-case alphanumeric words of a text, minus a small stop list. Shared
/// by the mock chat model and the mock embedder.
std::vector<std::string> content_tokens(std::string_view text);

// ---------------------------------------------------------------------------
// Content-addressed cache

class CacheStore {
public:
    virtual ~CacheStore() = default;
    virtual std::optional<std::string> get(const std::string& key) = 0;
    virtual void put(const std::string& key, const std::string& value) = 0;
};

class MemoryCacheStore final : public CacheStore {
public:
    std::optional<std::string> get(const std::string& key) override;
    void put(const std::string& key, const std::string& value) override;

private:
    std::mutex mu_;
    std::map<std::string, std::string> entries_;
};

/// Files under root/ab/cd/<key> (two-level hex fan-out).
class FileCacheStore final : public CacheStore {
public:
    explicit FileCacheStore(std::filesystem::path root);
    std::optional<std::string> get(const std::string& key) override;
    void put(const std::string& key, const std::string& value) override;
    std::filesystem::path path_for(const std::string& key) const;

private:
    std::filesystem::path root_;
};

/// Striped per-key locks; a miss holds the key's stripe until the value is
/// stored, so concurrent identical requests reach upstream once.
class KeyLocks {
public:
    std::unique_lock<std::mutex> lock(const std::string& key);

private:
    std::array<std::mutex, 64> stripes_;
};

struct CacheStats {
    std::atomic<std::size_t> hits{0};
    std::atomic<std::size_t> misses{0};
};

std::string chat_cache_key(const std::string& backend_id, const ChatRequest& req);
std::string embed_cache_key(const std::string& backend_id, const Payload& payload, EmbedModel model);
std::string image_cache_key(const std::string& backend_id, const std::string& prompt,
                            const std::string& generator_id, std::int64_t seed);

class CachingChatBackend final : public ChatBackend {
public:
    CachingChatBackend(ChatBackend& inner, CacheStore& store) : inner_(inner), store_(store) {}
    std::string backend_id() const override { return inner_.backend_id(); }
    ChatResponse chat(const ChatRequest& req) override;
    const CacheStats& stats() const { return stats_; }

private:
    ChatBackend& inner_;
    CacheStore& store_;
    KeyLocks locks_;
    CacheStats stats_;
};

class CachingEmbeddingBackend final : public EmbeddingBackend {
public:
    CachingEmbeddingBackend(EmbeddingBackend& inner, CacheStore& store) : inner_(inner), store_(store) {}
    std::string backend_id() const override { return inner_.backend_id(); }
    EmbeddingVector embed(const Payload& payload, EmbedModel model) override;
    const CacheStats& stats() const { return stats_; }

private:
    EmbeddingBackend& inner_;
    CacheStore& store_;
    KeyLocks locks_;
    CacheStats stats_;
};

class CachingImageBackend final : public ImageBackend {
public:
    CachingImageBackend(ImageBackend& inner, CacheStore& store) : inner_(inner), store_(store) {}
    std::string backend_id() const override { return inner_.backend_id(); }
    ImageArtifact generate_image(const std::string& prompt, const std::string& generator_id,
                                 std::int64_t seed) override;
    const CacheStats& stats() const { return stats_; }

private:
    ImageBackend& inner_;
    CacheStore& store_;
    KeyLocks locks_;
    CacheStats stats_;
};

// ---------------------------------------------------------------------------
// Configuration

/// URL value that selects the in-process mock backend.
inline constexpr std::string_view kMockUrl = "mock://";

struct BackendConfig {
    std::string chat_url = "http://localhost:8000";
    std::string embed_url = "http://localhost:8001";
    std::string image_url = "http://localhost:8001";
    std::string api_key;
    std::string chat_model = "Qwen/Qwen2-VL-7B-Instruct";
    std::int64_t timeout_s = 60;
    std::int64_t context_window = kDefaultContextWindow;
    double temperature = 0.1;
    std::int64_t max_tokens = 512;

    static BackendConfig from_json(const nlohmann::json& j);
    nlohmann::json to_json() const;
    /// KB_CHAT_URL, KB_EMBED_URL, KB_IMAGE_URL, KB_API_KEY.
    void apply_env();
};

/// Owning bundle of the three backends, optionally behind a cache.
struct BackendSet {
    std::unique_ptr<ChatBackend> chat_impl;
    std::unique_ptr<EmbeddingBackend> embed_impl;
    std::unique_ptr<ImageBackend> image_impl;
    std::unique_ptr<CacheStore> cache;
    std::unique_ptr<ChatBackend> chat_cached;
    std::unique_ptr<EmbeddingBackend> embed_cached;
    std::unique_ptr<ImageBackend> image_cached;

    ChatBackend& chat() { return chat_cached ? *chat_cached : *chat_impl; }
    EmbeddingBackend& embed() { return embed_cached ? *embed_cached : *embed_impl; }
    ImageBackend& image() { return image_cached ? *image_cached : *image_impl; }
};

/// `cache_dir` empty disables caching.
BackendSet make_backends(const BackendConfig& cfg, const std::filesystem::path& cache_dir = {},
                         RetryPolicy retry = {});

}  // namespace kbc
