#include "kbc/simeval.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <random>
#include <set>
#include <sstream>

#include "kbc/error.hpp"
#include "kbc/kernels.hpp"

namespace kbc {

using nlohmann::json;

json MissingMask::to_json() const {
    json e = json::object();
    for (const auto& [id, m] : entries) e[id] = modality_name(m);
    return json{{"eta", eta}, {"seed", seed}, {"entries", e}};
}

MissingMask MissingMask::from_json(const json& j) {
    MissingMask m;
    try {
        m.eta = j.at("eta").get<double>();
        m.seed = j.at("seed").get<std::uint64_t>();
        for (const auto& [id, v] : j.at("entries").items()) m.entries[id] = parse_modality(v.get<std::string>());
    } catch (const json::exception& e) {
        throw Error(Errc::ParseError, std::string("mask: ") + e.what());
    }
    return m;
}

std::size_t missing_count(double eta, std::size_t n) {
    if (!(eta >= 0.0 && eta <= 1.0)) throw Error(Errc::EtaOutOfRange, std::to_string(eta));
    return static_cast<std::size_t>(std::llround(eta * static_cast<double>(n)));
}

namespace {

// Unbiased integer in [0, bound) by rejection on the raw 64-bit stream.
std::uint64_t uniform_below(std::mt19937_64& rng, std::uint64_t bound) {
    const std::uint64_t threshold = (0 - bound) % bound;
    while (true) {
        const std::uint64_t r = rng();
        if (r >= threshold) return r % bound;
    }
}

}  // namespace

MissingMask simulate_missing(std::span<const std::string> ids, double eta, std::uint64_t seed) {
    const std::size_t k = missing_count(eta, ids.size());
    if (std::set<std::string>(ids.begin(), ids.end()).size() != ids.size())
        throw Error(Errc::Precondition, "sample ids must be unique");

    std::mt19937_64 rng(seed);
    std::vector<std::size_t> idx(ids.size());
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    MissingMask mask{eta, seed, {}};
    for (std::size_t i = 0; i < k; ++i) {
        const std::size_t j = i + static_cast<std::size_t>(uniform_below(rng, idx.size() - i));
        std::swap(idx[i], idx[j]);
        const bool drop_image = (rng() >> 63) != 0;
        mask.entries[ids[idx[i]]] = drop_image ? Modality::Image : Modality::Text;
    }
    return mask;
}

// ---------------------------------------------------------------------------
// CSV

namespace {

std::vector<std::string> split_csv_line(const std::string& line) {
    std::vector<std::string> out;
    std::string cur;
    for (char c : line) {
        if (c == ',') {
            out.push_back(cur);
            cur.clear();
        } else if (c != '\r') {
            cur.push_back(c);
        }
    }
    out.push_back(cur);
    for (auto& f : out) {
        const auto b = f.find_first_not_of(" \t");
        const auto e = f.find_last_not_of(" \t");
        f = b == std::string::npos ? std::string{} : f.substr(b, e - b + 1);
    }
    return out;
}

template <class Cell, class Convert>
void read_table(std::istream& in, std::vector<std::string>& labels, std::vector<std::string>& ids,
                std::vector<Cell>& cells, Convert convert) {
    std::string line;
    if (!std::getline(in, line)) throw Error(Errc::ParseError, "empty CSV");
    auto header = split_csv_line(line);
    if (header.size() < 2 || header[0] != "sample_id")
        throw Error(Errc::ParseError, "CSV header must start with sample_id followed by label names");
    labels.assign(header.begin() + 1, header.end());
    std::size_t lineno = 1;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        auto fields = split_csv_line(line);
        if (fields.size() != header.size())
            throw Error(Errc::ShapeMismatch, "line " + std::to_string(lineno) + " has " + std::to_string(fields.size()) +
                                                 " fields, expected " + std::to_string(header.size()));
        ids.push_back(fields[0]);
        for (std::size_t c = 1; c < fields.size(); ++c) cells.push_back(convert(fields[c], lineno));
    }
}

std::ifstream open(const std::filesystem::path& p) {
    if (!std::filesystem::exists(p)) throw Error(Errc::MissingFile, p.string());
    std::ifstream in(p);
    if (!in) throw Error(Errc::IoError, "cannot read " + p.string());
    return in;
}

}  // namespace

PredictionTable read_prediction_csv(std::istream& in) {
    PredictionTable t;
    read_table(in, t.label_names, t.sample_ids, t.scores, [](const std::string& f, std::size_t line) {
        std::size_t used = 0;
        double v = 0.0;
        try {
            v = std::stod(f, &used);
        } catch (const std::exception&) {
            used = 0;
        }
        if (used != f.size() || !std::isfinite(v))
            throw Error(Errc::ParseError, "line " + std::to_string(line) + ": bad score '" + f + "'");
        return v;
    });
    return t;
}

PredictionTable read_prediction_csv(const std::filesystem::path& path) {
    auto in = open(path);
    return read_prediction_csv(in);
}

GoldTable read_gold_csv(std::istream& in) {
    GoldTable t;
    read_table(in, t.label_names, t.sample_ids, t.labels, [](const std::string& f, std::size_t line) -> std::uint8_t {
        if (f == "0") return 0;
        if (f == "1") return 1;
        throw Error(Errc::ParseError, "line " + std::to_string(line) + ": gold entries must be 0 or 1");
    });
    return t;
}

GoldTable read_gold_csv(const std::filesystem::path& path) {
    auto in = open(path);
    return read_gold_csv(in);
}

void write_prediction_csv(std::ostream& out, const PredictionTable& t) {
    out << "sample_id";
    for (const auto& l : t.label_names) out << ',' << l;
    out << '\n';
    char buf[32];
    for (std::size_t r = 0; r < t.rows(); ++r) {
        out << t.sample_ids[r];
        for (std::size_t c = 0; c < t.cols(); ++c) {
            std::snprintf(buf, sizeof buf, "%.9g", t.scores[r * t.cols() + c]);
            out << ',' << buf;
        }
        out << '\n';
    }
}

void write_gold_csv(std::ostream& out, const GoldTable& t) {
    out << "sample_id";
    for (const auto& l : t.label_names) out << ',' << l;
    out << '\n';
    for (std::size_t r = 0; r < t.rows(); ++r) {
        out << t.sample_ids[r];
        for (std::size_t c = 0; c < t.cols(); ++c) out << ',' << int{t.labels[r * t.cols() + c]};
        out << '\n';
    }
}

GoldTable align_gold(const PredictionTable& pred, const GoldTable& gold) {
    if (pred.label_names != gold.label_names) throw Error(Errc::ShapeMismatch, "label sets differ");
    if (pred.scores.size() != pred.rows() * pred.cols() || gold.labels.size() != gold.rows() * gold.cols())
        throw Error(Errc::ShapeMismatch, "table is not rectangular");
    if (pred.rows() != gold.rows()) throw Error(Errc::ShapeMismatch, "sample counts differ");
    std::map<std::string_view, std::size_t> where;
    for (std::size_t r = 0; r < gold.rows(); ++r) where.emplace(gold.sample_ids[r], r);
    GoldTable out{gold.label_names, pred.sample_ids, {}};
    out.labels.reserve(gold.labels.size());
    for (const auto& id : pred.sample_ids) {
        auto it = where.find(id);
        if (it == where.end()) throw Error(Errc::ShapeMismatch, "sample '" + id + "' missing from gold");
        const auto row = std::span(gold.labels).subspan(it->second * gold.cols(), gold.cols());
        out.labels.insert(out.labels.end(), row.begin(), row.end());
    }
    return out;
}

double macro_f1(const PredictionTable& pred, const GoldTable& gold, double threshold) {
    const GoldTable g = align_gold(pred, gold);
    const auto counts = kernels::label_confusion(pred.scores, g.labels, pred.rows(), pred.cols(), threshold);
    double sum = 0.0;
    std::size_t used = 0;
    for (const auto& c : counts) {
        if (c.tp == 0 && c.fp == 0 && c.fn == 0) continue;
        sum += 2.0 * static_cast<double>(c.tp) / static_cast<double>(2 * c.tp + c.fp + c.fn);
        ++used;
    }
    return used == 0 ? 0.0 : 100.0 * sum / static_cast<double>(used);
}

double mean_ap(const PredictionTable& pred, const GoldTable& gold) {
    const GoldTable g = align_gold(pred, gold);
    const auto ap = kernels::label_average_precision(pred.scores, g.labels, pred.rows(), pred.cols());
    double sum = 0.0;
    std::size_t used = 0;
    for (double v : ap) {
        if (std::isnan(v)) continue;
        sum += v;
        ++used;
    }
    if (used == 0) throw Error(Errc::NoPositiveLabels, "no label has a positive sample");
    return 100.0 * sum / static_cast<double>(used);
}

double similarity_score(std::span<const SimilarityPair> pairs, EmbeddingBackend& embedder) {
    if (pairs.empty()) throw Error(Errc::Precondition, "similarity score needs at least one pair");
    std::size_t dim = 0;
    std::vector<double> lhs, rhs;
    for (const auto& p : pairs) {
        EmbeddingVector a, b;
        try {
            a = embedder.embed(p.ground_truth, EmbedModel::Clip);
            b = embedder.embed(p.generated, EmbedModel::Clip);
        } catch (const Error& e) {
            throw Error(Errc::EmbeddingUnavailable, e.what());
        }
        if (dim == 0) dim = a.dim();
        if (a.dim() != dim || b.dim() != dim) throw Error(Errc::ShapeMismatch, "embedding dimensions differ");
        lhs.insert(lhs.end(), a.values.begin(), a.values.end());
        rhs.insert(rhs.end(), b.values.begin(), b.values.end());
    }
    const auto cos = kernels::pairwise_cosine(lhs, rhs, pairs.size(), dim);
    double sum = 0.0;
    for (double c : cos) sum += std::max(0.0, c);
    return 100.0 * sum / static_cast<double>(pairs.size());
}

}  // namespace kbc
