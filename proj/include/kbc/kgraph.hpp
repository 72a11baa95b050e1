#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"

namespace kbc {

enum class Domain { General, Medical };

std::string_view domain_name(Domain d) noexcept;
Domain parse_domain(std::string_view name);

/// Case-folds, trims and collapses internal whitespace. Throws EmptyLabel.
std::string normalize_label(std::string_view raw);

struct Triplet {
    std::string head;
    std::string relation;
    std::string tail;

    auto operator<=>(const Triplet&) const = default;
};

struct StructuredKnowledge {
    std::vector<std::string> objects;
    std::map<std::string, std::int64_t> numbers;
    std::map<std::string, std::string> attributes;
    std::string style;
    Domain domain = Domain::General;

    bool operator==(const StructuredKnowledge&) const = default;
};

/// Checks the StructuredKnowledge invariants (normalized, unique objects,
/// non-negative counts, keys drawn from objects). Throws InconsistentStructured.
void validate(const StructuredKnowledge& sk);

class KnowledgeGraph {
public:
    KnowledgeGraph() = default;

    const std::optional<StructuredKnowledge>& structured() const noexcept { return structured_; }
    const std::vector<Triplet>& triplets() const noexcept { return triplets_; }
    const std::set<std::string>& nodes() const noexcept { return nodes_; }
    bool empty() const noexcept { return nodes_.empty(); }

    bool operator==(const KnowledgeGraph&) const = default;

private:
    friend KnowledgeGraph build_graph(std::span<const Triplet>, std::optional<StructuredKnowledge>);

    std::optional<StructuredKnowledge> structured_;
    std::vector<Triplet> triplets_;
    std::set<std::string> nodes_;
};

/// Normalizes every label, drops duplicate triplets (first occurrence wins)
/// and derives the node set from triplet endpoints and structured objects.
KnowledgeGraph build_graph(std::span<const Triplet> triplets,
                           std::optional<StructuredKnowledge> structured = std::nullopt);

/// Sorted union of both node sets.
std::vector<std::string> union_vocab(const KnowledgeGraph& g1, const KnowledgeGraph& g2);

/// Square binary matrix over an explicit vocabulary. Row i, column j is set
/// iff some triplet runs vocab[i] -> vocab[j]; the diagonal is always zero.
class AdjacencyMatrix {
public:
    AdjacencyMatrix() = default;
    explicit AdjacencyMatrix(std::vector<std::string> vocab);

    std::size_t size() const noexcept { return vocab_.size(); }
    const std::vector<std::string>& vocab() const noexcept { return vocab_; }
    std::span<const std::uint8_t> cells() const noexcept { return cells_; }
    std::span<const std::uint8_t> row(std::size_t i) const noexcept {
        return std::span(cells_).subspan(i * size(), size());
    }
    std::uint8_t at(std::size_t i, std::size_t j) const noexcept { return cells_[i * size() + j]; }
    void set(std::size_t i, std::size_t j) noexcept {
        if (i != j) cells_[i * size() + j] = 1;
    }

private:
    std::vector<std::string> vocab_;
    std::vector<std::uint8_t> cells_;
};

AdjacencyMatrix adjacency(const KnowledgeGraph& g, const std::vector<std::string>& vocab);

/// Mean row-wise cosine of two aligned adjacency matrices, scaled to [0, 100].
/// Rows that are zero in both matrices are skipped; an edgeless pair scores 0.
double graph_similarity(const AdjacencyMatrix& a, const AdjacencyMatrix& b);

/// Convenience: union-aligns both graphs and scores them.
double graph_similarity(const KnowledgeGraph& g1, const KnowledgeGraph& g2);

// JSON shapes: triplets as [{"head","relation","tail"}], structured
// knowledge as {"objects","numbers","attributes","style"}.
nlohmann::json to_json(const Triplet& t);
nlohmann::json to_json(std::span<const Triplet> ts);
nlohmann::json to_json(const StructuredKnowledge& sk);
nlohmann::json to_json(const KnowledgeGraph& g);
StructuredKnowledge structured_from_json(const nlohmann::json& j, Domain domain);
std::vector<Triplet> triplets_from_json(const nlohmann::json& j);
KnowledgeGraph graph_from_json(const nlohmann::json& j);

}  // namespace kbc
