#include "kbc/kgraph.hpp"

#include <algorithm>
#include <cctype>

#include "kbc/error.hpp"
#include "kbc/kernels.hpp"

namespace kbc {

using nlohmann::json;

std::string_view domain_name(Domain d) noexcept {
    return d == Domain::Medical ? "medical" : "general";
}

Domain parse_domain(std::string_view name) {
    if (name == "general") return Domain::General;
    if (name == "medical") return Domain::Medical;
    throw Error(Errc::ParseError, "unknown domain tag '" + std::string(name) + "'");
}

std::string normalize_label(std::string_view raw) {
    std::string out;
    out.reserve(raw.size());
    bool pending_space = false;
    for (unsigned char ch : raw) {
        if (std::isspace(ch)) {
            pending_space = !out.empty();
            continue;
        }
        if (pending_space) {
            out.push_back(' ');
            pending_space = false;
        }
        out.push_back(static_cast<char>(std::tolower(ch)));
    }
    if (out.empty()) throw Error(Errc::EmptyLabel, "label '" + std::string(raw) + "' is empty after normalization");
    return out;
}

void validate(const StructuredKnowledge& sk) {
    std::set<std::string> seen;
    for (const auto& o : sk.objects) {
        if (o.empty() || normalize_label(o) != o)
            throw Error(Errc::InconsistentStructured, "object '" + o + "' is not normalized");
        if (!seen.insert(o).second) throw Error(Errc::InconsistentStructured, "duplicate object '" + o + "'");
    }
    for (const auto& [k, v] : sk.numbers) {
        if (!seen.contains(k)) throw Error(Errc::InconsistentStructured, "count for unknown object '" + k + "'");
        if (v < 0) throw Error(Errc::InconsistentStructured, "negative count for '" + k + "'");
    }
    for (const auto& [k, v] : sk.attributes) {
        if (!seen.contains(k))
            throw Error(Errc::InconsistentStructured, "attributes for unknown object '" + k + "'");
    }
}

KnowledgeGraph build_graph(std::span<const Triplet> triplets, std::optional<StructuredKnowledge> structured) {
    KnowledgeGraph g;
    std::set<Triplet> seen;
    for (const auto& t : triplets) {
        Triplet n{normalize_label(t.head), normalize_label(t.relation), normalize_label(t.tail)};
        if (seen.insert(n).second) {
            g.nodes_.insert(n.head);
            g.nodes_.insert(n.tail);
            g.triplets_.push_back(std::move(n));
        }
    }
    if (structured) {
        validate(*structured);
        g.nodes_.insert(structured->objects.begin(), structured->objects.end());
        g.structured_ = std::move(structured);
    }
    return g;
}

std::vector<std::string> union_vocab(const KnowledgeGraph& g1, const KnowledgeGraph& g2) {
    std::vector<std::string> out;
    std::set_union(g1.nodes().begin(), g1.nodes().end(), g2.nodes().begin(), g2.nodes().end(),
                   std::back_inserter(out));
    return out;
}

AdjacencyMatrix::AdjacencyMatrix(std::vector<std::string> vocab)
    : vocab_(std::move(vocab)), cells_(vocab_.size() * vocab_.size(), 0) {}

AdjacencyMatrix adjacency(const KnowledgeGraph& g, const std::vector<std::string>& vocab) {
    std::map<std::string_view, std::size_t> index;
    for (std::size_t i = 0; i < vocab.size(); ++i) index.emplace(vocab[i], i);
    for (const auto& node : g.nodes()) {
        if (!index.contains(node)) throw Error(Errc::NodeNotInVocab, node);
    }
    AdjacencyMatrix m(vocab);
    for (const auto& t : g.triplets()) m.set(index.at(t.head), index.at(t.tail));
    return m;
}

double graph_similarity(const AdjacencyMatrix& a, const AdjacencyMatrix& b) {
    if (a.vocab() != b.vocab()) throw Error(Errc::VocabMismatch, "adjacency matrices are not aligned");
    return 100.0 * kernels::row_cosine(a.cells(), b.cells(), a.size()).mean();
}

double graph_similarity(const KnowledgeGraph& g1, const KnowledgeGraph& g2) {
    const auto vocab = union_vocab(g1, g2);
    return graph_similarity(adjacency(g1, vocab), adjacency(g2, vocab));
}

json to_json(const Triplet& t) { return json{{"head", t.head}, {"relation", t.relation}, {"tail", t.tail}}; }

json to_json(std::span<const Triplet> ts) {
    json arr = json::array();
    for (const auto& t : ts) arr.push_back(to_json(t));
    return arr;
}

json to_json(const StructuredKnowledge& sk) {
    json numbers = json::object();
    for (const auto& [k, v] : sk.numbers) numbers[k] = v;
    json attributes = json::object();
    for (const auto& [k, v] : sk.attributes) attributes[k] = v;
    return json{{"objects", sk.objects}, {"numbers", numbers}, {"attributes", attributes}, {"style", sk.style}};
}

json to_json(const KnowledgeGraph& g) {
    json j{{"triplets", to_json(g.triplets())}, {"nodes", g.nodes()}};
    if (g.structured()) {
        j["structured"] = to_json(*g.structured());
        j["domain"] = domain_name(g.structured()->domain);
    }
    return j;
}

namespace {

const json& require(const json& obj, const char* key) {
    auto it = obj.find(key);
    if (it == obj.end()) throw Error(Errc::SchemaViolation, std::string("missing key '") + key + "'");
    return *it;
}

std::string label_field(const json& obj, const char* key) {
    const json& v = require(obj, key);
    if (!v.is_string()) throw Error(Errc::SchemaViolation, std::string("'") + key + "' must be a string");
    try {
        return normalize_label(v.get_ref<const std::string&>());
    } catch (const Error&) {
        throw Error(Errc::SchemaViolation, std::string("'") + key + "' is empty");
    }
}

}  // namespace

StructuredKnowledge structured_from_json(const json& j, Domain domain) {
    if (!j.is_object()) throw Error(Errc::SchemaViolation, "structured knowledge must be an object");
    StructuredKnowledge sk;
    sk.domain = domain;

    const json& objects = require(j, "objects");
    if (!objects.is_array()) throw Error(Errc::SchemaViolation, "'objects' must be an array");
    std::set<std::string> seen;
    for (const auto& o : objects) {
        if (!o.is_string()) throw Error(Errc::SchemaViolation, "object names must be strings");
        std::string label;
        try {
            label = normalize_label(o.get_ref<const std::string&>());
        } catch (const Error&) {
            throw Error(Errc::SchemaViolation, "empty object name");
        }
        if (seen.insert(label).second) sk.objects.push_back(std::move(label));
    }

    if (auto it = j.find("numbers"); it != j.end() && !it->is_null()) {
        if (!it->is_object()) throw Error(Errc::SchemaViolation, "'numbers' must be an object");
        for (const auto& [k, v] : it->items()) {
            const std::string key = normalize_label(k);
            if (!seen.contains(key)) throw Error(Errc::SchemaViolation, "count for unknown object '" + key + "'");
            if (!v.is_number_integer() || v.get<std::int64_t>() < 0)
                throw Error(Errc::SchemaViolation, "count for '" + key + "' must be a non-negative integer");
            sk.numbers[key] = v.get<std::int64_t>();
        }
    }
    if (auto it = j.find("attributes"); it != j.end() && !it->is_null()) {
        if (!it->is_object()) throw Error(Errc::SchemaViolation, "'attributes' must be an object");
        for (const auto& [k, v] : it->items()) {
            const std::string key = normalize_label(k);
            if (!seen.contains(key))
                throw Error(Errc::SchemaViolation, "attributes for unknown object '" + key + "'");
            if (!v.is_string()) throw Error(Errc::SchemaViolation, "attributes for '" + key + "' must be text");
            sk.attributes[key] = v.get<std::string>();
        }
    }
    if (auto it = j.find("style"); it != j.end() && !it->is_null()) {
        if (!it->is_string()) throw Error(Errc::SchemaViolation, "'style' must be text");
        sk.style = it->get<std::string>();
    }
    return sk;
}

std::vector<Triplet> triplets_from_json(const json& j) {
    if (!j.is_array()) throw Error(Errc::SchemaViolation, "triplets must be an array");
    std::vector<Triplet> out;
    std::set<Triplet> seen;
    for (const auto& item : j) {
        if (!item.is_object()) throw Error(Errc::SchemaViolation, "triplet entries must be objects");
        Triplet t{label_field(item, "head"), label_field(item, "relation"), label_field(item, "tail")};
        if (seen.insert(t).second) out.push_back(std::move(t));
    }
    return out;
}

KnowledgeGraph graph_from_json(const json& j) {
    auto triplets = triplets_from_json(require(j, "triplets"));
    std::optional<StructuredKnowledge> sk;
    if (auto it = j.find("structured"); it != j.end() && !it->is_null()) {
        const Domain d = j.contains("domain") ? parse_domain(j.at("domain").get<std::string>()) : Domain::General;
        sk = structured_from_json(*it, d);
    }
    return build_graph(triplets, std::move(sk));
}

}  // namespace kbc
