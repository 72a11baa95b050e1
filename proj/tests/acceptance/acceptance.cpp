// Acceptance run: one PASS/FAIL line per criterion, exit status 1 if any fail.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <functional>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "fixture.hpp"
#include "kbc/pipeline.hpp"
#include "oracles.hpp"

using namespace kbc;
namespace fs = std::filesystem;
using Clock = std::chrono::steady_clock;

namespace {

constexpr double kGraphTol = 1e-9;
constexpr double kRankTol = 1e-9;
constexpr double kMetricTol = 1e-9;
constexpr double kGraphBudgetS = 1.0;
constexpr double kRankBudgetS = 5.0;
constexpr double kEndToEndBudgetS = 30.0;
constexpr double kDropLow = 0.45;
constexpr double kDropHigh = 0.55;

struct Check {
    bool ok = true;
    std::string why;

    void expect(bool cond, const std::string& what) {
        if (!cond && ok) {
            ok = false;
            why = what;
        }
    }
};

int failures = 0;

void report(const std::string& name, const std::function<Check()>& body) {
    const auto start = Clock::now();
    Check c;
    try {
        c = body();
    } catch (const std::exception& e) {
        c.ok = false;
        c.why = std::string("exception: ") + e.what();
    }
    const double s = std::chrono::duration<double>(Clock::now() - start).count();
    std::printf("%s  %-28s %7.3fs%s%s\n", c.ok ? "PASS" : "FAIL", name.c_str(), s, c.ok ? "" : "  ",
                c.ok ? "" : c.why.c_str());
    std::fflush(stdout);
    failures += !c.ok;
}

double seconds_since(Clock::time_point t) { return std::chrono::duration<double>(Clock::now() - t).count(); }

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

const TemplateLibrary& templates() {
    static const TemplateLibrary l = TemplateLibrary::load(TemplateLibrary::default_dir());
    return l;
}

// ---------------------------------------------------------------------------
// graph similarity

std::vector<std::string> label_pool(const std::string& prefix, int n) {
    std::vector<std::string> out;
    for (int i = 0; i < n; ++i) out.push_back(prefix + std::to_string(i));
    return out;
}

KnowledgeGraph random_graph(std::mt19937_64& rng, const std::vector<std::string>& pool, bool need_edge) {
    std::vector<std::string> nodes = pool;
    std::shuffle(nodes.begin(), nodes.end(), rng);
    nodes.resize(std::uniform_int_distribution<std::size_t>(need_edge ? 2 : 1, 8)(rng));
    std::uniform_int_distribution<std::size_t> pick(0, nodes.size() - 1);
    std::vector<Triplet> ts;
    const int edges = std::uniform_int_distribution<int>(need_edge ? 1 : 0, 12)(rng);
    for (int e = 0; e < edges; ++e) ts.push_back({nodes[pick(rng)], "rel", nodes[pick(rng)]});
    if (need_edge) ts.push_back({nodes[0], "rel", nodes[1]});
    StructuredKnowledge sk;
    for (const auto& n : nodes) sk.objects.push_back(n);
    return build_graph(ts, sk);
}

std::pair<std::set<std::string>, std::vector<oracle::Edge>> as_oracle(const KnowledgeGraph& g) {
    std::vector<oracle::Edge> edges;
    for (const auto& t : g.triplets()) edges.emplace_back(t.head, t.tail);
    return {g.nodes(), edges};
}

double oracle_similarity(const KnowledgeGraph& a, const KnowledgeGraph& b) {
    const auto [na, ea] = as_oracle(a);
    const auto [nb, eb] = as_oracle(b);
    return oracle::graph_similarity(na, ea, nb, eb);
}

Check graph_suite() {
    Check c;
    const auto start = Clock::now();
    std::mt19937_64 rng(20240601);
    const auto pool = label_pool("n", 10);
    for (int i = 0; i < 200; ++i) {
        const auto a = random_graph(rng, pool, false);
        const auto b = random_graph(rng, pool, false);
        c.expect(a.nodes().size() <= 8 && b.nodes().size() <= 8, "node budget exceeded");
        c.expect(std::abs(graph_similarity(a, b) - oracle_similarity(a, b)) <= kGraphTol,
                 "pair " + std::to_string(i) + " differs from the brute-force reference");
        const auto self = random_graph(rng, pool, true);
        c.expect(graph_similarity(self, self) == 100.0, "identity pair " + std::to_string(i) + " is not exactly 100");
        const auto left = random_graph(rng, label_pool("l", 10), true);
        const auto right = random_graph(rng, label_pool("r", 10), true);
        c.expect(graph_similarity(left, right) == 0.0, "disjoint pair " + std::to_string(i) + " is not exactly 0");
    }
    c.expect(seconds_since(start) < kGraphBudgetS, "over the 1 s budget");
    return c;
}

// ---------------------------------------------------------------------------
// quality score and ranking

const std::vector<std::string> kWords{"dog", "cat", "grass", "ball", "tree", "man", "car", "road", "sky", "house", "bird"};

std::string random_caption(std::mt19937_64& rng) {
    std::uniform_int_distribution<std::size_t> w(0, kWords.size() - 1);
    std::string s = "a";
    for (int i = 0; i < 4; ++i) s += " " + kWords[w(rng)];
    return s;
}

KnowledgeGraph random_word_graph(std::mt19937_64& rng) {
    std::uniform_int_distribution<std::size_t> w(0, kWords.size() - 1);
    std::vector<Triplet> ts;
    const int n = std::uniform_int_distribution<int>(0, 6)(rng);
    for (int i = 0; i < n; ++i) ts.push_back({kWords[w(rng)], "near", kWords[w(rng)]});
    return build_graph(ts);
}

std::size_t oracle_argmax(const std::vector<double>& v) {
    std::size_t best = 0;
    for (std::size_t i = 1; i < v.size(); ++i)
        if (v[i] > v[best]) best = i;
    return best;
}

// Every term recomputed from the raw payloads with a fresh embedder.
std::vector<double> oracle_totals(const Payload& available, const KnowledgeGraph& ga, std::span<const Candidate> cs,
                                  Weights w, ScoreMode mode) {
    MockEmbeddingBackend fresh;
    std::vector<double> out;
    for (const auto& c : cs) {
        double g = oracle_similarity(ga, c.graph);
        if (mode == ScoreMode::Normalized) g /= 100.0;
        const double clip = oracle::cosine(fresh.embed(available, EmbedModel::Clip).values,
                                           fresh.embed(c.payload, EmbedModel::Clip).values);
        const double blip = oracle::cosine(fresh.embed(available, EmbedModel::Blip).values,
                                           fresh.embed(c.payload, EmbedModel::Blip).values);
        out.push_back(w.graph * g + w.clip * clip + w.blip * blip);
    }
    return out;
}

Check ranking_suite() {
    Check c;
    const auto start = Clock::now();
    std::mt19937_64 rng(77);
    MockImageBackend images;
    MockEmbeddingBackend embed;
    for (int set = 0; set < 100; ++set) {
        const Payload available = Payload::text(random_caption(rng));
        const KnowledgeGraph ga = random_word_graph(rng);
        std::vector<Candidate> cs(5);
        for (std::size_t i = 0; i < cs.size(); ++i) {
            cs[i].index = i;
            cs[i].seed = static_cast<std::int64_t>(i);
            const auto art = images.generate_image(random_caption(rng), "mock", cs[i].seed);
            cs[i].payload = Payload::image(art.bytes, art.format);
            cs[i].graph = random_word_graph(rng);
        }
        for (ScoreMode mode : {ScoreMode::Normalized, ScoreMode::PaperLiteral}) {
            const auto r = rank_candidates(available, ga, cs, {}, mode, embed);
            const auto expect = oracle_totals(available, ga, cs, {}, mode);
            for (std::size_t i = 0; i < cs.size(); ++i)
                c.expect(std::abs(r.entries[i].total() - expect[i]) <= kRankTol,
                         "set " + std::to_string(set) + " total differs from recomputation");
            c.expect(r.best_index == oracle_argmax(expect), "set " + std::to_string(set) + " best_index differs");
            for (double k : {0.5, 3.0}) {
                const auto scaled = rank_candidates(available, ga, cs, {k, k, k}, mode, embed);
                c.expect(scaled.best_index == r.best_index, "weight scaling changed the winner");
            }
        }
    }
    const std::vector<double> tie{2.0, 2.0};
    c.expect(first_argmax(tie) == 0, "tie [2.0, 2.0] did not select index 0");
    c.expect(seconds_since(start) < kRankBudgetS, "over the 5 s budget");
    return c;
}

// ---------------------------------------------------------------------------
// metrics

std::pair<PredictionTable, GoldTable> to_tables(const std::vector<std::vector<double>>& s,
                                                const std::vector<std::vector<int>>& g) {
    PredictionTable p;
    GoldTable t;
    for (std::size_t l = 0; l < g[0].size(); ++l) p.label_names.push_back("l" + std::to_string(l));
    t.label_names = p.label_names;
    for (std::size_t i = 0; i < g.size(); ++i) p.sample_ids.push_back("x" + std::to_string(i));
    t.sample_ids = p.sample_ids;
    for (std::size_t i = 0; i < g.size(); ++i)
        for (std::size_t l = 0; l < g[i].size(); ++l) {
            p.scores.push_back(s[i][l]);
            t.labels.push_back(static_cast<std::uint8_t>(g[i][l]));
        }
    return {p, t};
}

Check metric_suite() {
    Check c;
    std::mt19937_64 rng(4242);
    std::uniform_int_distribution<int> tick(0, 40);
    std::bernoulli_distribution pos(0.3);
    for (int trial = 0; trial < 100; ++trial) {
        std::vector<std::vector<double>> s(50, std::vector<double>(10));
        std::vector<std::vector<int>> g(50, std::vector<int>(10));
        for (auto& row : s)
            for (auto& x : row) x = tick(rng) / 40.0;
        for (auto& row : g)
            for (auto& x : row) x = pos(rng);
        g[trial % 50][trial % 10] = 1;
        const auto [p, t] = to_tables(s, g);
        c.expect(std::abs(macro_f1(p, t) - oracle::macro_f1(s, g)) <= kMetricTol, "macro F1 differs from reference");
        c.expect(std::abs(mean_ap(p, t) - oracle::mean_ap(s, g)) <= kMetricTol, "mAP differs from reference");

        std::vector<std::vector<double>> perfect(50, std::vector<double>(10)), wrong = perfect;
        for (std::size_t i = 0; i < 50; ++i)
            for (std::size_t l = 0; l < 10; ++l) {
                perfect[i][l] = g[i][l] ? 0.9 : 0.1;
                wrong[i][l] = g[i][l] ? 0.1 : 0.9;
            }
        const auto [pp, tp] = to_tables(perfect, g);
        c.expect(macro_f1(pp, tp) == 100.0 && mean_ap(pp, tp) == 100.0, "perfect table is not 100");
        const auto [pw, tw] = to_tables(wrong, g);
        c.expect(macro_f1(pw, tw) == 0.0, "all-wrong table is not 0");
    }
    return c;
}

// ---------------------------------------------------------------------------
// simulation

Check simulation_suite() {
    Check c;
    std::vector<std::string> ids;
    char buf[16];
    for (int i = 0; i < 100; ++i) {
        std::snprintf(buf, sizeof buf, "s%03d", i);
        ids.push_back(buf);
    }
    for (const auto& [eta, want] : std::vector<std::pair<std::string, std::size_t>>{{"0.3", 30}, {"0.5", 50}, {"0.7", 70}}) {
        const auto m = simulate_missing(ids, std::stod(eta), 7);
        c.expect(m.entries.size() == want, "eta " + eta + " selected the wrong count");
        std::ifstream in(std::string(KBC_SOURCE_DIR) + "/tests/golden/mask_n100_eta" + eta + "_seed7.json");
        c.expect(static_cast<bool>(in), "golden mask for eta " + eta + " missing");
        if (in) c.expect(MissingMask::from_json(nlohmann::json::parse(in)) == m, "eta " + eta + " differs from golden");
    }
    std::size_t images = 0, total = 0;
    for (std::uint64_t seed = 0; seed < 1000; ++seed)
        for (const auto& [_, mod] : simulate_missing(ids, 0.5, seed).entries) {
            images += mod == Modality::Image;
            ++total;
        }
    const double frac = static_cast<double>(images) / static_cast<double>(total);
    c.expect(frac >= kDropLow && frac <= kDropHigh, "image-drop fraction " + std::to_string(frac) + " out of band");
    return c;
}

// ---------------------------------------------------------------------------
// end to end

PipelineConfig mock_config() {
    PipelineConfig cfg;
    cfg.backends.chat_url = cfg.backends.embed_url = cfg.backends.image_url = std::string(kMockUrl);
    cfg.eta = 0.5;
    cfg.seed = 7;
    return cfg;
}

Check end_to_end() {
    Check c;
    const auto start = Clock::now();
    const auto root = kbc::testing::scratch_dir("acceptance-e2e");
    const Manifest m = load_manifest(kbc::testing::write_fixture(root / "fixture"));
    c.expect(m.samples.size() == 8, "fixture does not have 8 samples");
    const auto mask = cmd_simulate(m, 0.5, 7);
    const auto a = cmd_complete(m, mask, mock_config(), root / "runs", "first");
    const auto b = cmd_complete(m, mask, mock_config(), root / "runs", "second");
    c.expect(a.exit_code == 0 && b.exit_code == 0, "a run exited nonzero");
    c.expect(a.completed == a.attempted && a.completed > 0, "not every target completed");
    c.expect(slurp(a.run_dir / "scores.csv") == slurp(b.run_dir / "scores.csv"), "scores.csv differs between runs");
    std::size_t chosen = 0;
    for (const auto& e : fs::directory_iterator(a.run_dir / "chosen")) {
        ++chosen;
        c.expect(slurp(e.path()) == slurp(b.run_dir / "chosen" / e.path().filename()),
                 "chosen completion differs: " + e.path().filename().string());
    }
    c.expect(chosen == a.completed, "chosen/ does not hold one file per completion");
    MockEmbeddingBackend embed;
    const auto rep = cmd_replay(a.run_dir, embed);
    c.expect(rep.ok(), rep.problems.empty() ? "replay failed" : rep.problems.front());
    c.expect(!rep.items.empty(), "replay checked nothing");
    for (const auto& item : rep.items)
        c.expect(item.stored_total == item.replayed_total, "replayed total differs for " + item.sample_id);
    c.expect(seconds_since(start) < kEndToEndBudgetS, "over the 30 s budget");
    return c;
}

// ---------------------------------------------------------------------------
// parser robustness

std::string response_fixture(const std::string& name) {
    return slurp(fs::path(KBC_SOURCE_DIR) / "tests/fixtures/responses" / name);
}

Check parser_suite() {
    Check c;
    const std::string general = response_fixture("general.json");
    const std::string triplets = response_fixture("triplets.json");
    const std::string medical = response_fixture("medical.md");
    auto variants = [](const std::string& bare, const std::string& lang) {
        return std::vector<std::string>{bare, "```" + lang + "\n" + bare + "```\n",
                                        "Here is the result of the analysis.\n\n" + bare + "\nLet me know if anything else is needed."};
    };
    const auto g0 = parse_structured_extraction(general, Domain::General);
    for (const auto& v : variants(general, "json"))
        c.expect(parse_structured_extraction(v, Domain::General) == g0, "general record changes under wrapping");
    const auto t0 = parse_triplets(triplets);
    c.expect(!t0.empty(), "triplet fixture parsed empty");
    for (const auto& v : variants(triplets, "json")) c.expect(parse_triplets(v) == t0, "triplets change under wrapping");
    const auto m0 = parse_structured_extraction(medical, Domain::Medical);
    for (const auto& v : variants(medical, "markdown"))
        c.expect(parse_structured_extraction(v, Domain::Medical) == m0, "medical record changes under wrapping");

    const std::vector<std::string> malformed{response_fixture("malformed_truncated.txt"),
                                             response_fixture("malformed_schema.txt"),
                                             response_fixture("malformed_prose.txt")};
    Sample s;
    s.id = "probe";
    s.text = "A brown dog catches a red frisbee on the grass.";
    GenerationConfig cfg;
    const std::size_t expected_calls = 1 + (cfg.repair_attempts + 1);

    // each malformed reply on its own, repeated until the budget is spent
    for (const auto& bad : malformed) {
        auto mock = std::make_shared<MockChatBackend>();
        ScriptedChatBackend chat([&, mock](const ChatRequest& r, std::size_t i) { return i == 0 ? mock->chat(r).text : bad; });
        MockImageBackend images;
        Completer completer(templates(), chat, images, cfg);
        Transcript t;
        bool failed_cleanly = false;
        try {
            completer.extract_knowledge(s, t);
        } catch (const Error& e) {
            failed_cleanly = e.code() == Errc::ExtractionFailed && e.detail().find("stage=integrate") != std::string::npos;
        }
        c.expect(failed_cleanly, "malformed reply did not end in ExtractionFailed(integrate)");
        c.expect(chat.calls() == expected_calls, "repair loop ran " + std::to_string(chat.calls()) + " calls");
    }
    // all three in sequence
    {
        auto mock = std::make_shared<MockChatBackend>();
        ScriptedChatBackend chat([&, mock](const ChatRequest& r, std::size_t i) {
            return i == 0 ? mock->chat(r).text : malformed[(i - 1) % malformed.size()];
        });
        MockImageBackend images;
        Completer completer(templates(), chat, images, cfg);
        Transcript t;
        bool threw = false;
        try {
            completer.extract_knowledge(s, t);
        } catch (const Error& e) {
            threw = e.code() == Errc::ExtractionFailed;
        }
        c.expect(threw && chat.calls() == expected_calls, "mixed malformed sequence did not exhaust the loop exactly");
    }
    return c;
}

// ---------------------------------------------------------------------------
// ablation weights

Check ablation_suite() {
    Check c;
    const auto root = kbc::testing::scratch_dir("acceptance-ablation");
    const Manifest m = kbc::testing::fixture_manifest();
    const auto mask = cmd_simulate(m, 1.0, 7);
    struct Variant {
        std::string name;
        Weights w;
    };
    for (const auto& v : {Variant{"graph-only", {1, 0, 0}}, Variant{"semantic-only", {0, 1, 1}}}) {
        auto cfg = mock_config();
        cfg.weights = v.w;
        const auto r = cmd_complete(m, mask, cfg, root, v.name);
        c.expect(r.completed == m.samples.size(), v.name + ": not every sample completed");
        const auto run = load_run(r.run_dir);
        for (const auto& s : run.samples) {
            if (!s.completed()) continue;
            const auto& cs = s.candidates->candidates;
            std::vector<double> score;
            MockEmbeddingBackend fresh;
            for (const auto& cand : cs) {
                if (v.w.graph > 0) {
                    score.push_back(oracle_similarity(s.knowledge->graph, cand.graph));
                } else {
                    score.push_back(oracle::cosine(fresh.embed(*s.available, EmbedModel::Clip).values,
                                                   fresh.embed(cand.payload, EmbedModel::Clip).values) +
                                    oracle::cosine(fresh.embed(*s.available, EmbedModel::Blip).values,
                                                   fresh.embed(cand.payload, EmbedModel::Blip).values));
                }
            }
            const std::size_t want = oracle_argmax(score);
            c.expect(s.ranking->best_index == want,
                     v.name + ": " + s.sample_id + " chose " + std::to_string(s.ranking->best_index) + ", oracle " +
                         std::to_string(want));
        }
    }
    return c;
}

}  // namespace

int main() {
    report("graph similarity oracle", graph_suite);
    report("quality score and ranking", ranking_suite);
    report("metric oracle", metric_suite);
    report("missing-modality simulation", simulation_suite);
    report("end-to-end determinism", end_to_end);
    report("parser robustness", parser_suite);
    report("ablation weights", ablation_suite);
    std::printf("%d of 7 criteria failed\n", failures);
    return failures == 0 ? 0 : 1;
}
