#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "kbc/backends.hpp"
#include "kbc/error.hpp"
#include "kbc/kgraph.hpp"
#include "kbc/prompting.hpp"

namespace kbc {

struct Sample {
    std::string id;
    std::optional<Payload> image;
    std::optional<std::string> text;
    std::vector<std::uint8_t> labels;  // one 0/1 entry per manifest label
    Domain domain = Domain::General;

    bool has(Modality m) const { return m == Modality::Image ? image.has_value() : text.has_value(); }
    std::optional<Payload> payload(Modality m) const;
    /// The same sample with modality `m` withheld.
    Sample without(Modality m) const;
};

struct FewShotExample {
    std::optional<ImagePart> image;
    std::string report;
};

struct GenerationConfig {
    std::size_t n_candidates = 5;
    std::size_t object_count = 6;
    std::size_t kg_relationship_count = 8;
    std::size_t repair_attempts = 2;
    std::int64_t base_seed = 0;
    /// Concurrent candidates within one sample.
    std::size_t candidate_workers = 1;

    std::string chat_model = "Qwen/Qwen2-VL-7B-Instruct";
    double temperature = 0.1;
    std::int64_t max_tokens = 512;

    std::string general_generator = "sdxl";
    std::string medical_generator = "cheff";
    /// Medical extraction templates carry two worked examples.
    std::vector<FewShotExample> few_shot;

    nlohmann::json to_json() const;
    static GenerationConfig from_json(const nlohmann::json& j);
};

/// One request/response pair with the chat backend.
struct Exchange {
    std::string stage;  // extract | integrate | build_kg | expand | refine
    std::size_t attempt = 0;  // 0 for the first ask, 1.. for repairs
    nlohmann::json messages;  // digest form
    std::string response;
};

using Transcript = std::vector<Exchange>;

nlohmann::json to_json(const Exchange& e);
Exchange exchange_from_json(const nlohmann::json& j);

struct KnowledgeResult {
    StructuredKnowledge structured;
    KnowledgeGraph graph;
    std::size_t repairs = 0;
};

struct Candidate {
    std::size_t index = 0;
    Payload payload;
    std::string description;
    std::int64_t seed = 0;
    KnowledgeGraph graph;
    /// Set when extraction on the candidate failed; `graph` is then empty.
    std::string graph_error;
};

struct CandidateSet {
    Modality target = Modality::Image;
    std::vector<Candidate> candidates;
    KnowledgeGraph source_graph;
    bool short_list = false;
    std::vector<std::pair<std::size_t, std::string>> failures;  // index, reason
};

/// Runs `fn(i)` for i in [0, n) on up to `workers` threads.
void parallel_for_index(std::size_t n, std::size_t workers, const std::function<void(std::size_t)>& fn);

/// Text block substituted for the `[knowledge-graphs]` placeholder; lists
/// the entities that the description views alternate over.
std::string knowledge_graph_block(const KnowledgeGraph& g);

/// Subjects for entity alternation: structured objects first, then the
/// remaining nodes in sorted order.
std::vector<std::string> alternation_entities(const KnowledgeGraph& g);

class Completer {
public:
    Completer(const TemplateLibrary& templates, ChatBackend& chat, ImageBackend& images, GenerationConfig config);

    const GenerationConfig& config() const { return config_; }

    /// CoT knowledge extraction over the sample's available modalities:
    /// domain extraction, integration into the return format, triplets.
    /// Throws ExtractionFailed(stage) once the repair budget is spent.
    KnowledgeResult extract_knowledge(const Sample& sample, Transcript& transcript) const;

    /// Asks for n_candidates descriptions; short lists are padded by cycling.
    DescriptionList expand_descriptions(const KnowledgeGraph& graph, const std::optional<std::string>& basic_sentence,
                                        Domain domain, Transcript& transcript) const;

    /// Generates candidates for `missing` (absent from `sample`) and extracts
    /// a knowledge graph from each. Throws GenerationFailed if none succeed.
    CandidateSet generate_candidates(const Sample& sample, Modality missing, const KnowledgeResult& source,
                                     Transcript& transcript) const;

private:
    ChatRequest request(std::vector<ChatMessage> messages, std::optional<std::int64_t> seed = std::nullopt) const;

    template <class Parse>
    auto ask_with_repair(std::vector<ChatMessage> messages, const std::string& stage, Errc failure, Parse&& parse,
                         Transcript& transcript, std::size_t& repairs) const;

    const TemplateLibrary& templates_;
    ChatBackend& chat_;
    ImageBackend& images_;
    GenerationConfig config_;
};

}  // namespace kbc
