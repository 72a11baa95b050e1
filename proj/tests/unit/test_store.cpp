#include <gtest/gtest.h>

#include <cmath>
#include <fstream>
#include <set>

#include "fixture.hpp"
#include "kbc/store.hpp"

using namespace kbc;
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

Errc code_of(auto&& fn) {
    try {
        fn();
    } catch (const Error& e) {
        return e.code();
    }
    ADD_FAILURE() << "expected an error";
    return Errc::Precondition;
}

const TemplateLibrary& lib() {
    static const TemplateLibrary l = TemplateLibrary::load(TemplateLibrary::default_dir());
    return l;
}

// Runs the mock pipeline on one fixture sample with `missing` withheld.
SampleRecord completed_record(const Sample& full, Modality missing, Weights w = {}) {
    MockChatBackend chat;
    MockImageBackend images;
    MockEmbeddingBackend embed;
    Completer c(lib(), chat, images, {});
    SampleRecord r;
    r.sample_id = full.id;
    r.missing = missing;
    const Sample s = full.without(missing);
    r.available = s.payload(missing == Modality::Image ? Modality::Text : Modality::Image);
    r.knowledge = c.extract_knowledge(s, r.transcript);
    r.candidates = c.generate_candidates(s, missing, *r.knowledge, r.transcript);
    r.ranking = rank_candidates(*r.available, r.knowledge->graph, r.candidates->candidates, w, ScoreMode::Normalized, embed);
    r.seconds = 0.25;
    return r;
}

json config_with(Weights w) {
    return json{{"ranking", {{"weights", {w.graph, w.clip, w.blip}}, {"mode", "normalized"}}}};
}

void write_text(const fs::path& p, const std::string& s) {
    std::ofstream(p) << s;
}

}  // namespace

TEST(Manifest, FixtureLoads) {
    const auto dir = kbc::testing::scratch_dir("manifest");
    const auto path = kbc::testing::write_fixture(dir);
    const auto m = load_manifest(path);
    EXPECT_EQ(m.samples.size(), 8u);
    EXPECT_EQ(m.label_names.size(), 6u);
    for (const auto& s : m.samples) {
        EXPECT_TRUE(s.image || s.text);
        EXPECT_EQ(s.labels.size(), 6u);
    }
    const auto expected = kbc::testing::fixture_manifest();
    for (std::size_t i = 0; i < 8; ++i) EXPECT_EQ(m.samples[i].image, expected.samples[i].image);
    EXPECT_TRUE(m.find("s03"));
    EXPECT_FALSE(m.find("nope"));
}

TEST(Manifest, MissingImageNamesTheSample) {
    const auto dir = kbc::testing::scratch_dir("manifest-missing");
    const auto path = kbc::testing::write_fixture(dir);
    const auto m = load_manifest(path);
    fs::remove(dir / m.image_refs[2]);
    try {
        load_manifest(path);
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.code(), Errc::MissingFile);
        EXPECT_EQ(e.detail(), m.samples[2].id);
    }
    EXPECT_EQ(code_of([&] { load_manifest(dir / "absent.json"); }), Errc::MissingFile);
}

TEST(Manifest, InvalidDocuments) {
    const auto dir = kbc::testing::scratch_dir("manifest-bad");
    const auto p = dir / "m.json";
    const std::vector<std::string> docs{
        R"({"dataset_id":"d","label_names":["a"],"samples":[{"id":"x","text":"t"},{"id":"x","text":"u"}]})",
        R"({"dataset_id":"d","label_names":["a"],"samples":[{"id":"x"}]})",
        R"({"dataset_id":"d","label_names":["a"],"samples":[{"id":"x","text":"t","labels":["b"]}]})",
        R"({"dataset_id":"d","label_names":["a"],"samples":[{"id":"x,y","text":"t"}]})",
        R"({"dataset_id":"d","label_names":["a","a"],"samples":[]})",
        R"({"label_names":["a"],"samples":[]})",
        "{ not json",
    };
    for (const auto& d : docs) {
        write_text(p, d);
        EXPECT_EQ(code_of([&] { load_manifest(p); }), Errc::ParseError) << d;
    }
    write_text(dir / "bogus.png", "not an image");
    write_text(p, R"({"dataset_id":"d","label_names":["a"],"samples":[{"id":"x","image":"bogus.png"}]})");
    EXPECT_EQ(code_of([&] { load_manifest(p); }), Errc::ParseError);
}

TEST(Manifest, GoldTableFollowsLabels) {
    const auto m = kbc::testing::fixture_manifest();
    const auto g = gold_table(m);
    EXPECT_EQ(g.rows(), 8u);
    EXPECT_EQ(g.cols(), 6u);
    EXPECT_EQ(std::vector<std::uint8_t>(g.labels.begin(), g.labels.begin() + 6), m.samples[0].labels);
}

TEST(Formatting, NineSignificantDigits) {
    EXPECT_EQ(format_double(1.0), "1");
    EXPECT_EQ(format_double(1.0 / 3.0), "0.333333333");
    EXPECT_EQ(format_double(-std::numeric_limits<double>::infinity()), "-inf");
    EXPECT_EQ(safe_name("s01"), "s01");
    EXPECT_NE(safe_name("a/b"), safe_name("a_b"));
    EXPECT_EQ(safe_name("a/b").find('/'), std::string::npos);
}

TEST(RunLayout, FreshRunHasSevenEntries) {
    const auto root = kbc::testing::scratch_dir("runs");
    const auto m = kbc::testing::fixture_manifest();
    RunRecord rec{"r1", config_with({}), {completed_record(m.samples[0], Modality::Image)}, false};
    const auto dir = persist_run(rec, root);
    std::set<std::string> entries;
    for (const auto& e : fs::directory_iterator(dir)) entries.insert(e.path().filename().string());
    EXPECT_EQ(entries, (std::set<std::string>{"config.json", "transcripts", "graphs", "candidates", "scores.csv",
                                              "chosen", "report.md"}));
    EXPECT_EQ(code_of([&] { persist_run(rec, root); }), Errc::RunExists);
}

TEST(RunLayout, ScoresCsvShape) {
    const auto root = kbc::testing::scratch_dir("runs-csv");
    const auto m = kbc::testing::fixture_manifest();
    RunRecord rec{"r", config_with({}), {completed_record(m.samples[0], Modality::Image)}, false};
    const auto dir = persist_run(rec, root);
    std::ifstream in(dir / "scores.csv");
    std::string header;
    std::getline(in, header);
    EXPECT_EQ(header, "sample_id,candidate_index,graph_term,clip_term,blip_term,total,chosen");
    const auto rows = read_scores_csv(dir / "scores.csv");
    EXPECT_EQ(rows.size(), rec.samples[0].ranking->entries.size());
    EXPECT_EQ(std::count_if(rows.begin(), rows.end(), [](const ScoreRow& r) { return r.chosen; }), 1);
}

TEST(RunLayout, DecompositionReplaysFromCsv) {
    const auto root = kbc::testing::scratch_dir("runs-decomp");
    const auto m = kbc::testing::fixture_manifest();
    const Weights w{0.6, 1.4, 0.9};
    RunRecord rec{"r", config_with(w), {completed_record(m.samples[1], Modality::Image, w),
                                        completed_record(m.samples[3], Modality::Text, w)}, false};
    const auto dir = persist_run(rec, root);
    for (const auto& row : read_scores_csv(dir / "scores.csv")) {
        const double g = std::stod(row.graph_term), c = std::stod(row.clip_term), b = std::stod(row.blip_term);
        const double t = std::stod(row.total);
        EXPECT_NEAR(w.graph * g + w.clip * c + w.blip * b, t, 1e-8 * std::max(1.0, std::abs(t))) << row.sample_id;
    }
}

TEST(RunLayout, LoadRunRoundTrip) {
    const auto root = kbc::testing::scratch_dir("runs-load");
    const auto m = kbc::testing::fixture_manifest();
    SampleRecord failed;
    failed.sample_id = "s08";
    failed.missing = Modality::Text;
    failed.error = "ExtractionFailed: stage=integrate";
    RunRecord rec{"r", config_with({}), {completed_record(m.samples[2], Modality::Image), failed}, false};
    const auto dir = persist_run(rec, root);
    const auto back = load_run(dir);
    EXPECT_EQ(back.run_id, "r");
    EXPECT_EQ(back.config, rec.config);
    ASSERT_EQ(back.samples.size(), 2u);
    const auto& a = back.samples[0];
    const auto& orig = rec.samples[0];
    EXPECT_EQ(a.sample_id, orig.sample_id);
    EXPECT_EQ(a.available, orig.available);
    EXPECT_EQ(a.knowledge->graph, orig.knowledge->graph);
    EXPECT_EQ(a.knowledge->structured, orig.knowledge->structured);
    ASSERT_EQ(a.candidates->candidates.size(), orig.candidates->candidates.size());
    for (std::size_t i = 0; i < orig.candidates->candidates.size(); ++i) {
        EXPECT_EQ(a.candidates->candidates[i].payload, orig.candidates->candidates[i].payload);
        EXPECT_EQ(a.candidates->candidates[i].graph, orig.candidates->candidates[i].graph);
        EXPECT_EQ(a.candidates->candidates[i].seed, orig.candidates->candidates[i].seed);
    }
    EXPECT_EQ(a.ranking->best_index, orig.ranking->best_index);
    EXPECT_EQ(a.chosen(), orig.chosen());
    EXPECT_EQ(a.transcript.size(), orig.transcript.size());
    EXPECT_FALSE(back.samples[1].completed());
    EXPECT_EQ(back.samples[1].error, failed.error);
    // chosen payload is stored by value too
    bool found = false;
    for (const auto& e : fs::directory_iterator(dir / "chosen")) found = true;
    EXPECT_TRUE(found);
}

TEST(RunLayout, AppendOnly) {
    const auto root = kbc::testing::scratch_dir("runs-append");
    const auto m = kbc::testing::fixture_manifest();
    RunWriter w(root, "r", config_with({}));
    const auto first = completed_record(m.samples[0], Modality::Image);
    w.append(first);
    std::map<fs::path, fs::file_time_type> stamps;
    std::map<fs::path, std::uintmax_t> sizes;
    for (const auto& e : fs::recursive_directory_iterator(w.dir()))
        if (e.is_regular_file()) {
            stamps[e.path()] = e.last_write_time();
            sizes[e.path()] = e.file_size();
        }
    EXPECT_THROW(w.append(first), Error);
    w.append(completed_record(m.samples[1], Modality::Image));
    w.finalize();
    for (const auto& [p, t] : stamps) {
        EXPECT_EQ(fs::last_write_time(p), t) << p;
        EXPECT_EQ(fs::file_size(p), sizes[p]) << p;
    }
    EXPECT_THROW(w.append(completed_record(m.samples[2], Modality::Image)), Error);
}

TEST(RunLayout, RankingJsonRoundTrip) {
    const auto m = kbc::testing::fixture_manifest();
    const auto r = completed_record(m.samples[0], Modality::Image);
    const auto back = ranking_from_json(to_json(*r.ranking));
    EXPECT_EQ(back.best_index, r.ranking->best_index);
    EXPECT_EQ(back.order, r.ranking->order);
    for (std::size_t i = 0; i < back.entries.size(); ++i)
        EXPECT_EQ(back.entries[i].total(), r.ranking->entries[i].total());
}
