#pragma once

#include <cstdint>
#include <filesystem>
#include <istream>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "kbc/backends.hpp"
#include "kbc/error.hpp"
#include "kbc/media.hpp"

namespace kbc {

struct MissingMask {
    double eta = 0.0;
    std::uint64_t seed = 0;
    std::map<std::string, Modality> entries;  // sample id -> withheld modality

    nlohmann::json to_json() const;
    static MissingMask from_json(const nlohmann::json& j);
    bool operator==(const MissingMask&) const = default;
};

/// Number of samples a rate of `eta` withholds from `n`: round(eta * n).
std::size_t missing_count(double eta, std::size_t n);

/// Picks round(eta * N) ids uniformly without replacement and withholds one
/// modality of each, image or text by a fair coin. A pure function of its
/// arguments on every platform (explicit mt19937_64 stream, no library
/// distributions). Throws EtaOutOfRange, Precondition on duplicate ids.
MissingMask simulate_missing(std::span<const std::string> ids, double eta, std::uint64_t seed);

struct PredictionTable {
    std::vector<std::string> label_names;
    std::vector<std::string> sample_ids;
    std::vector<double> scores;  // row-major, sample x label

    std::size_t rows() const { return sample_ids.size(); }
    std::size_t cols() const { return label_names.size(); }
};

struct GoldTable {
    std::vector<std::string> label_names;
    std::vector<std::string> sample_ids;
    std::vector<std::uint8_t> labels;  // row-major 0/1

    std::size_t rows() const { return sample_ids.size(); }
    std::size_t cols() const { return label_names.size(); }
};

/// CSV: header `sample_id,<label>...`, then one row per sample.
PredictionTable read_prediction_csv(std::istream& in);
PredictionTable read_prediction_csv(const std::filesystem::path& path);
GoldTable read_gold_csv(std::istream& in);
GoldTable read_gold_csv(const std::filesystem::path& path);
void write_prediction_csv(std::ostream& out, const PredictionTable& t);
void write_gold_csv(std::ostream& out, const GoldTable& t);

/// Gold rows reordered to match the prediction's sample order. Throws
/// ShapeMismatch when ids or labels differ.
GoldTable align_gold(const PredictionTable& pred, const GoldTable& gold);

/// Macro-averaged F1 in [0, 100]. Labels with no predicted and no actual
/// positives are skipped; 0 when every label is skipped.
double macro_f1(const PredictionTable& pred, const GoldTable& gold, double threshold = 0.5);

/// Mean over labels with at least one positive of the non-interpolated AP,
/// in [0, 100]. Throws NoPositiveLabels when no label has a positive.
double mean_ap(const PredictionTable& pred, const GoldTable& gold);

struct SimilarityPair {
    Payload ground_truth;
    Payload generated;
};

/// Mean CLIP cosine between ground truth and generated payloads (negative
/// cosines count as 0), in [0, 100].
double similarity_score(std::span<const SimilarityPair> pairs, EmbeddingBackend& embedder);

}  // namespace kbc
