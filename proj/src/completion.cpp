#include "kbc/completion.hpp"

#include <algorithm>
#include <atomic>
#include <exception>
#include <mutex>
#include <thread>

#include "kbc/error.hpp"

namespace kbc {

using nlohmann::json;

std::optional<Payload> Sample::payload(Modality m) const {
    if (m == Modality::Image) return image;
    if (text) return Payload::text(*text);
    return std::nullopt;
}

Sample Sample::without(Modality m) const {
    Sample s = *this;
    if (m == Modality::Image) s.image.reset();
    else s.text.reset();
    return s;
}

json GenerationConfig::to_json() const {
    return json{{"n_candidates", n_candidates},
                {"object_count", object_count},
                {"kg_relationship_count", kg_relationship_count},
                {"repair_attempts", repair_attempts},
                {"base_seed", base_seed},
                {"candidate_workers", candidate_workers},
                {"chat_model", chat_model},
                {"temperature", temperature},
                {"max_tokens", max_tokens},
                {"general_generator", general_generator},
                {"medical_generator", medical_generator},
                {"few_shot_examples", few_shot.size()}};
}

GenerationConfig GenerationConfig::from_json(const json& j) {
    GenerationConfig c;
    c.n_candidates = j.value("n_candidates", c.n_candidates);
    c.object_count = j.value("object_count", c.object_count);
    c.kg_relationship_count = j.value("kg_relationship_count", c.kg_relationship_count);
    c.repair_attempts = j.value("repair_attempts", c.repair_attempts);
    c.base_seed = j.value("base_seed", c.base_seed);
    c.candidate_workers = j.value("candidate_workers", c.candidate_workers);
    c.chat_model = j.value("chat_model", c.chat_model);
    c.temperature = j.value("temperature", c.temperature);
    c.max_tokens = j.value("max_tokens", c.max_tokens);
    c.general_generator = j.value("general_generator", c.general_generator);
    c.medical_generator = j.value("medical_generator", c.medical_generator);
    if (c.n_candidates < 1) throw Error(Errc::Precondition, "n_candidates must be >= 1");
    return c;
}

json to_json(const Exchange& e) {
    return json{{"stage", e.stage}, {"attempt", e.attempt}, {"messages", e.messages}, {"response", e.response}};
}

Exchange exchange_from_json(const json& j) {
    return Exchange{j.at("stage").get<std::string>(), j.at("attempt").get<std::size_t>(), j.at("messages"),
                    j.at("response").get<std::string>()};
}

void parallel_for_index(std::size_t n, std::size_t workers, const std::function<void(std::size_t)>& fn) {
    workers = std::clamp<std::size_t>(workers, 1, std::max<std::size_t>(n, 1));
    if (workers == 1) {
        for (std::size_t i = 0; i < n; ++i) fn(i);
        return;
    }
    std::atomic<std::size_t> next{0};
    std::exception_ptr first_error;
    std::mutex error_mu;
    {
        std::vector<std::jthread> pool;
        for (std::size_t w = 0; w < workers; ++w) {
            pool.emplace_back([&] {
                for (std::size_t i = next++; i < n; i = next++) {
                    try {
                        fn(i);
                    } catch (...) {
                        std::lock_guard lock(error_mu);
                        if (!first_error) first_error = std::current_exception();
                    }
                }
            });
        }
    }
    if (first_error) std::rethrow_exception(first_error);
}

std::vector<std::string> alternation_entities(const KnowledgeGraph& g) {
    std::vector<std::string> out;
    if (g.structured()) out = g.structured()->objects;
    for (const auto& n : g.nodes()) {
        if (std::find(out.begin(), out.end(), n) == out.end()) out.push_back(n);
    }
    return out;
}

std::string knowledge_graph_block(const KnowledgeGraph& g) {
    std::string out = "# Knowledge Graph\n";
    out += "Triplets: " + to_json(g.triplets()).dump() + "\n";
    if (g.structured()) out += "Structured: " + to_json(*g.structured()).dump() + "\n";
    out += "Take each entity below as the subject of one description, in order, while covering every node and "
           "attribute of the knowledge graph.\n";
    out += "Entities: ";
    const auto entities = alternation_entities(g);
    for (std::size_t i = 0; i < entities.size(); ++i) out += (i ? "; " : "") + entities[i];
    return out;
}

Completer::Completer(const TemplateLibrary& templates, ChatBackend& chat, ImageBackend& images,
                     GenerationConfig config)
    : templates_(templates), chat_(chat), images_(images), config_(std::move(config)) {
    if (config_.n_candidates < 1) throw Error(Errc::Precondition, "n_candidates must be >= 1");
}

ChatRequest Completer::request(std::vector<ChatMessage> messages, std::optional<std::int64_t> seed) const {
    ChatRequest r;
    r.model_id = config_.chat_model;
    r.messages = std::move(messages);
    r.temperature = config_.temperature;
    r.max_tokens = config_.max_tokens;
    r.seed = seed;
    return r;
}

template <class Parse>
auto Completer::ask_with_repair(std::vector<ChatMessage> messages, const std::string& stage, Errc failure,
                                Parse&& parse, Transcript& transcript, std::size_t& repairs) const {
    std::string last_error;
    for (std::size_t attempt = 0; attempt <= config_.repair_attempts; ++attempt) {
        const ChatResponse r = chat_.chat(request(messages));
        transcript.push_back(Exchange{stage, attempt, to_digest_json(messages), r.text});
        try {
            auto parsed = parse(r.text);
            repairs += attempt;
            return parsed;
        } catch (const Error& e) {
            last_error = e.what();
        }
        messages.push_back(ChatMessage::text(Role::Assistant, r.text));
        messages.push_back(ChatMessage::text(
            Role::User, substitute(templates_.fragment(templates::kRepair), {{"parse-error", last_error}})));
    }
    throw Error(failure, "stage=" + stage + "; " + last_error);
}

namespace {

const std::string kNoExample = "(no example provided)";

}  // namespace

KnowledgeResult Completer::extract_knowledge(const Sample& sample, Transcript& transcript) const {
    if (!sample.image && !sample.text) throw Error(Errc::Precondition, "sample " + sample.id + " has no modality");

    PlaceholderMap values;
    AttachmentMap attachments;
    std::string_view tmpl;
    if (sample.domain == Domain::General) {
        tmpl = templates::kExtractionGeneral;
        values["input-format"] = sample.image && sample.text ? "image and text" : sample.image ? "image" : "text";
        values["object-numbers"] = std::to_string(config_.object_count);
    } else {
        tmpl = sample.image ? templates::kExtractionMedicalXray : templates::kExtractionMedicalReport;
        for (std::size_t k = 0; k < 2; ++k) {
            const std::string n = std::to_string(k + 1);
            const FewShotExample* ex = k < config_.few_shot.size() ? &config_.few_shot[k] : nullptr;
            if (ex && ex->image) attachments["example-image-" + n] = *ex->image;
            else values["example-image-" + n] = kNoExample;
            values["example-report-" + n] = ex && !ex->report.empty() ? ex->report : kNoExample;
        }
    }
    if (sample.image) attachments[std::string(kUserInputSlot)] = ImagePart{sample.image->bytes, sample.image->format};
    if (sample.text) values[std::string(kUserInputSlot)] = *sample.text;

    KnowledgeResult out;
    std::vector<ChatMessage> messages = templates_.render(tmpl, values, attachments);
    const ChatResponse analysis = chat_.chat(request(messages));
    transcript.push_back(Exchange{"extract", 0, to_digest_json(messages), analysis.text});

    messages.push_back(ChatMessage::text(Role::Assistant, analysis.text));
    const auto& fmt = templates_.fragment(sample.domain == Domain::General ? templates::kReturnFormatGeneral
                                                                         : templates::kReturnFormatMedical);
    for (auto& m : templates_.render(templates::kIntegrateCot, {{"return-format", fmt}})) messages.push_back(std::move(m));
    out.structured = ask_with_repair(
        messages, "integrate", Errc::ExtractionFailed,
        [&](const std::string& text) { return parse_structured_extraction(text, sample.domain); }, transcript,
        out.repairs);

    const auto kg_messages = templates_.render(
        templates::kBuildKg, {{"input-type", "structured data"},
                              {"numbers-of-relationships", std::to_string(config_.kg_relationship_count)},
                              {std::string(kUserInputSlot), to_json(out.structured).dump(2)}});
    const auto triplets = ask_with_repair(
        kg_messages, "build_kg", Errc::ExtractionFailed, [](const std::string& text) { return parse_triplets(text); },
        transcript, out.repairs);
    try {
        out.graph = build_graph(triplets, out.structured);
    } catch (const Error& e) {
        throw Error(Errc::ExtractionFailed, std::string("stage=build_kg; ") + e.what());
    }
    return out;
}

DescriptionList Completer::expand_descriptions(const KnowledgeGraph& graph,
                                               const std::optional<std::string>& basic_sentence, Domain domain,
                                               Transcript& transcript) const {
    if (graph.empty()) throw Error(Errc::Precondition, "cannot expand descriptions from an empty knowledge graph");
    const std::size_t n = config_.n_candidates;
    PlaceholderMap values{{"num-prompts", std::to_string(n)}, {"knowledge-graphs", knowledge_graph_block(graph)}};
    std::vector<ChatMessage> messages;
    if (domain == Domain::General) {
        values["text-content"] = basic_sentence.value_or("(none)");
        messages = templates_.render(templates::kExpandGeneral, values);
    } else {
        if (basic_sentence) values[std::string(kUserInputSlot)] = *basic_sentence;
        messages = templates_.render(templates::kExpandMedical, values);
    }
    std::size_t repairs = 0;
    DescriptionList list = ask_with_repair(
        messages, "expand", Errc::ExpansionFailed,
        [n](const std::string& text) { return parse_description_list(text, n); }, transcript, repairs);
    if (list.short_list) {
        const std::size_t parsed = list.descriptions.size();
        for (std::size_t i = parsed; i < n; ++i) list.descriptions.push_back(list.descriptions[i % parsed]);
    }
    return list;
}

CandidateSet Completer::generate_candidates(const Sample& sample, Modality missing, const KnowledgeResult& source,
                                            Transcript& transcript) const {
    if (sample.has(missing)) throw Error(Errc::Precondition, "sample " + sample.id + " still has the target modality");
    const Modality available = missing == Modality::Image ? Modality::Text : Modality::Image;
    if (!sample.has(available)) throw Error(Errc::Precondition, "sample " + sample.id + " has nothing to condition on");

    CandidateSet set;
    set.target = missing;
    set.source_graph = source.graph;

    const std::optional<std::string> basic = missing == Modality::Image ? sample.text : std::nullopt;
    const DescriptionList views = expand_descriptions(source.graph, basic, sample.domain, transcript);
    set.short_list = views.short_list;

    const std::size_t n = views.descriptions.size();
    std::vector<std::optional<Candidate>> slots(n);
    std::vector<Transcript> logs(n);
    std::vector<std::string> errors(n);
    const std::string generator =
        sample.domain == Domain::General ? config_.general_generator : config_.medical_generator;
    const std::string kg_block = knowledge_graph_block(source.graph);

    parallel_for_index(n, config_.candidate_workers, [&](std::size_t i) {
        Candidate c;
        c.index = i;
        c.description = views.descriptions[i];
        c.seed = config_.base_seed + static_cast<std::int64_t>(i);
        try {
            if (missing == Modality::Image) {
                ImageArtifact art = images_.generate_image(c.description, generator, c.seed);
                c.payload = Payload::image(std::move(art.bytes), art.format);
            } else {
                const auto messages = templates_.render(
                    templates::kRefineText,
                    {{"target-format", sample.domain == Domain::General ? "caption" : "clinical report"},
                     {"description", c.description},
                     {"knowledge-graphs", kg_block}});
                const ChatResponse r = chat_.chat(request(messages, c.seed));
                logs[i].push_back(Exchange{"refine", 0, to_digest_json(messages), r.text});
                std::string text = r.text;
                if (text.find_first_not_of(" \t\r\n") == std::string::npos)
                    throw Error(Errc::GenerationFailed, "empty refined text");
                c.payload = Payload::text(std::move(text));
            }
        } catch (const Error& e) {
            errors[i] = e.what();
            return;
        }

        Sample probe;
        probe.id = sample.id + "#" + std::to_string(i);
        probe.domain = sample.domain;
        if (missing == Modality::Image) probe.image = c.payload;
        else probe.text = c.payload.bytes;
        try {
            c.graph = extract_knowledge(probe, logs[i]).graph;
        } catch (const Error& e) {
            c.graph_error = e.what();
        }
        slots[i] = std::move(c);
    });

    for (std::size_t i = 0; i < n; ++i) {
        for (auto& e : logs[i]) transcript.push_back(std::move(e));
        if (slots[i]) set.candidates.push_back(std::move(*slots[i]));
        else set.failures.emplace_back(i, errors[i]);
    }
    if (set.candidates.empty()) {
        std::string detail = "all " + std::to_string(n) + " candidates failed";
        if (!set.failures.empty()) detail += "; first: " + set.failures.front().second;
        throw Error(Errc::GenerationFailed, detail);
    }
    return set;
}

}  // namespace kbc
