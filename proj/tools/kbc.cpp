// kbc: missing-modality completion from the command line.

#include <csignal>
#include <fstream>
#include <iostream>
#include <sstream>

#include "CLI11.hpp"
#include "kbc/error.hpp"
#include "kbc/kernels.hpp"
#include "kbc/pipeline.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct UsageError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct ConfigFlags {
    std::string config_file;
    double eta = 0.5;
    std::uint64_t seed = 0;
    std::size_t candidates = 5;
    std::size_t object_count = 6;
    std::string graph_mode = "normalized";
    std::string weights = "1,1,1";
    std::size_t workers = 1;
    bool cache = false;
    std::string cache_dir;
    std::string templates;
    std::string chat_url, embed_url, image_url, api_key, chat_model;
    bool mock = false;
    double max_failure_fraction = 0.0;

    std::map<std::string, CLI::Option*> opts;
};

CLI::Option* env_option(CLI::Option* o, const std::string& env) { return o->envname("KB_" + env); }

const CLI::Validator kWeightsCheck(
    [](std::string& s) -> std::string {
        try {
            kbc::parse_weights(s);
        } catch (const kbc::Error& e) {
            return e.detail();
        }
        return {};
    },
    "wg,wc,wb");

void add_backend_flags(CLI::App* app, ConfigFlags& f) {
    auto& o = f.opts;
    o["chat-url"] = env_option(app->add_option("--chat-url", f.chat_url, "OpenAI-compatible chat endpoint"), "CHAT_URL");
    o["embed-url"] = env_option(app->add_option("--embed-url", f.embed_url, "Embedding service endpoint"), "EMBED_URL");
    o["image-url"] = env_option(app->add_option("--image-url", f.image_url, "Image generation endpoint"), "IMAGE_URL");
    o["api-key"] = env_option(app->add_option("--api-key", f.api_key, "Bearer token for the endpoints"), "API_KEY");
    o["chat-model"] = env_option(app->add_option("--chat-model", f.chat_model, "Chat model id"), "CHAT_MODEL");
    o["mock"] = env_option(app->add_flag("--mock", f.mock, "Use the built-in deterministic mock backends"), "MOCK");
    o["config"] = env_option(app->add_option("--config", f.config_file, "Pipeline config JSON; flags override it")
                                 ->check(CLI::ExistingFile),
                             "CONFIG");
    o["templates"] = env_option(
        app->add_option("--templates", f.templates, "Prompt template directory")->check(CLI::ExistingDirectory),
        "TEMPLATES");
    o["workers"] = env_option(app->add_option("--workers", f.workers, "Concurrent samples")->capture_default_str()
                                  ->check(CLI::PositiveNumber),
                              "WORKERS");
    o["object-count"] = env_option(app->add_option("--object-count", f.object_count, "Objects to extract per sample")
                                       ->capture_default_str()
                                       ->check(CLI::PositiveNumber),
                                   "OBJECT_COUNT");
    o["cache"] = env_option(app->add_flag("--cache", f.cache, "Cache backend responses on disk"), "CACHE");
    o["cache-dir"] = env_option(app->add_option("--cache-dir", f.cache_dir, "Cache location (default <out>/cache)"),
                                "CACHE_DIR");
}

void add_ranking_flags(CLI::App* app, ConfigFlags& f) {
    auto& o = f.opts;
    o["graph-mode"] = env_option(app->add_option("--graph-mode", f.graph_mode, "How graph similarity enters the score")
                                     ->capture_default_str()
                                     ->check(CLI::IsMember({"normalized", "paper-literal"})),
                                 "GRAPH_MODE");
    o["weights"] = env_option(app->add_option("--weights", f.weights, "Score weights wg,wc,wb")
                                  ->capture_default_str()
                                  ->check(kWeightsCheck),
                              "WEIGHTS");
}

void add_generation_flags(CLI::App* app, ConfigFlags& f) {
    auto& o = f.opts;
    o["eta"] = env_option(app->add_option("--eta", f.eta, "Missing rate in [0, 1]")->capture_default_str()
                              ->check(CLI::Range(0.0, 1.0)),
                          "ETA");
    o["seed"] = env_option(app->add_option("--seed", f.seed, "Seed for masking and generation")->capture_default_str(),
                           "SEED");
    o["candidates"] = env_option(app->add_option("--candidates", f.candidates, "Candidates per missing modality")
                                     ->capture_default_str()
                                     ->check(CLI::PositiveNumber),
                                 "CANDIDATES");
    o["max-failure-fraction"] =
        env_option(app->add_option("--max-failure-fraction", f.max_failure_fraction,
                                   "Tolerated fraction of failed samples before exiting 1")
                       ->capture_default_str()
                       ->check(CLI::Range(0.0, 1.0)),
                   "MAX_FAILURE_FRACTION");
}

bool given(const ConfigFlags& f, const std::string& name) {
    const auto it = f.opts.find(name);
    return it != f.opts.end() && it->second->count() > 0;
}

json read_json_file(const fs::path& p) {
    std::ifstream in(p);
    if (!in) throw kbc::Error(kbc::Errc::IoError, "cannot read " + p.string());
    try {
        return json::parse(in);
    } catch (const json::parse_error& e) {
        throw kbc::Error(kbc::Errc::ParseError, p.string() + ": " + e.what());
    }
}

kbc::PipelineConfig build_config(const ConfigFlags& f, std::optional<kbc::PipelineConfig> base = std::nullopt) {
    kbc::PipelineConfig c = base ? *base : kbc::PipelineConfig{};
    if (!f.config_file.empty()) c = kbc::PipelineConfig::from_json(read_json_file(f.config_file));
    if (given(f, "eta")) c.eta = f.eta;
    if (given(f, "seed")) c.seed = f.seed;
    if (given(f, "candidates")) c.n_candidates = f.candidates;
    if (given(f, "object-count")) c.object_count = f.object_count;
    if (given(f, "graph-mode")) c.mode = kbc::parse_score_mode(f.graph_mode);
    if (given(f, "weights")) c.weights = kbc::parse_weights(f.weights);
    if (given(f, "workers")) c.workers = f.workers;
    if (given(f, "cache")) c.cache = f.cache;
    if (given(f, "cache-dir")) {
        c.cache_dir = f.cache_dir;
        c.cache = true;
    }
    if (given(f, "templates")) c.template_dir = f.templates;
    if (f.mock) c.backends.chat_url = c.backends.embed_url = c.backends.image_url = std::string(kbc::kMockUrl);
    if (given(f, "chat-url")) c.backends.chat_url = f.chat_url;
    if (given(f, "embed-url")) c.backends.embed_url = f.embed_url;
    if (given(f, "image-url")) c.backends.image_url = f.image_url;
    if (given(f, "api-key")) c.backends.api_key = f.api_key;
    if (given(f, "chat-model")) c.backends.chat_model = f.chat_model;
    if (given(f, "max-failure-fraction")) c.max_failure_fraction = f.max_failure_fraction;
    c.validate();
    return c;
}

void write_output(const std::string& path, const std::string& text) {
    if (path.empty() || path == "-") {
        std::cout << text;
        return;
    }
    const fs::path p(path);
    if (p.has_parent_path()) fs::create_directories(p.parent_path());
    std::ofstream out(p, std::ios::binary | std::ios::trunc);
    if (!out) throw kbc::Error(kbc::Errc::IoError, "cannot write " + p.string());
    out << text;
}

void on_sigint(int) { kbc::interrupt_flag().store(true); }

void print_error_table(const std::vector<std::pair<std::string, std::string>>& errors) {
    if (errors.empty()) return;
    std::size_t width = 6;
    for (const auto& [id, _] : errors) width = std::max(width, id.size());
    std::cerr << "failed samples:\n";
    for (const auto& [id, msg] : errors) std::cerr << "  " << id << std::string(width - id.size() + 2, ' ') << msg << "\n";
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Knowledge-graph guided completion of missing modalities"};
    app.require_subcommand(1);
    app.set_version_flag("--version", "kbc 1.0");
    int threads = 0;
    env_option(app.add_option("--threads", threads, "OpenMP threads for numeric kernels (0 = default)"), "THREADS");

    // complete
    ConfigFlags cf;
    std::string c_manifest, c_mask, c_out = "runs", c_run_id;
    auto* complete = app.add_subcommand("complete", "Complete the missing modality of masked samples");
    env_option(complete->add_option("--manifest", c_manifest, "Dataset manifest")->required()->check(CLI::ExistingFile),
               "MANIFEST");
    env_option(complete->add_option("--mask", c_mask, "Mask file (default: simulate from --eta/--seed)")
                   ->check(CLI::ExistingFile),
               "MASK");
    env_option(complete->add_option("--out", c_out, "Root directory for run records")->capture_default_str(), "OUT");
    env_option(complete->add_option("--run-id", c_run_id, "Run directory name (default: timestamp + digest)"), "RUN_ID");
    add_generation_flags(complete, cf);
    add_ranking_flags(complete, cf);
    add_backend_flags(complete, cf);

    // simulate
    std::string s_manifest, s_out;
    double s_eta = 0.5;
    std::uint64_t s_seed = 0;
    auto* simulate = app.add_subcommand("simulate", "Write a missing-modality mask");
    env_option(simulate->add_option("--manifest", s_manifest, "Dataset manifest")->required()->check(CLI::ExistingFile),
               "MANIFEST");
    env_option(simulate->add_option("--eta", s_eta, "Missing rate in [0, 1]")->capture_default_str()
                   ->check(CLI::Range(0.0, 1.0)),
               "ETA");
    env_option(simulate->add_option("--seed", s_seed, "Mask seed")->capture_default_str(), "SEED");
    env_option(simulate->add_option("--out", s_out, "Mask file (default: stdout)"), "OUT");

    // evaluate
    ConfigFlags ef;
    std::string e_pred, e_gold, e_manifest, e_run, e_out, e_dataset;
    double e_eta = 0.0;
    std::uint64_t e_seed = 0;
    auto* evaluate = app.add_subcommand("evaluate", "Macro F1 and mAP of predictions, SS of a completed run");
    env_option(evaluate->add_option("--pred", e_pred, "Prediction CSV (sample_id,<label>...)")
                   ->required()
                   ->check(CLI::ExistingFile),
               "PRED");
    env_option(evaluate->add_option("--gold", e_gold, "Gold CSV (default: labels from --manifest)")
                   ->check(CLI::ExistingFile),
               "GOLD");
    env_option(evaluate->add_option("--manifest", e_manifest, "Dataset manifest")->check(CLI::ExistingFile), "MANIFEST");
    env_option(evaluate->add_option("--run", e_run, "Run directory; adds the similarity score")
                   ->check(CLI::ExistingDirectory),
               "RUN");
    env_option(evaluate->add_option("--eta", e_eta, "Missing rate the predictions were made at")->capture_default_str()
                   ->check(CLI::Range(0.0, 1.0)),
               "ETA");
    env_option(evaluate->add_option("--seed", e_seed, "Seed the predictions were made with")->capture_default_str(),
               "SEED");
    env_option(evaluate->add_option("--dataset", e_dataset, "Dataset label for the report"), "DATASET");
    env_option(evaluate->add_option("--out", e_out, "Evaluation JSON (default: stdout)"), "OUT");
    ef.opts["embed-url"] = env_option(evaluate->add_option("--embed-url", ef.embed_url, "Embedding service endpoint"),
                                      "EMBED_URL");
    ef.opts["api-key"] = env_option(evaluate->add_option("--api-key", ef.api_key, "Bearer token"), "API_KEY");
    ef.opts["mock"] = env_option(evaluate->add_flag("--mock", ef.mock, "Use the mock embedder"), "MOCK");

    // extract
    ConfigFlags xf;
    std::string x_manifest, x_out;
    std::vector<std::string> x_samples;
    auto* extract = app.add_subcommand("extract", "Extract structured knowledge and graphs from samples");
    env_option(extract->add_option("--manifest", x_manifest, "Dataset manifest")->required()->check(CLI::ExistingFile),
               "MANIFEST");
    env_option(extract->add_option("--sample", x_samples, "Sample id (repeatable; default: all)"), "SAMPLE");
    env_option(extract->add_option("--out", x_out, "Output JSON (default: stdout)"), "OUT");
    add_backend_flags(extract, xf);

    // rank
    ConfigFlags rf;
    std::string r_run, r_out;
    auto* rank = app.add_subcommand("rank", "Re-rank the stored candidates of a run");
    env_option(rank->add_option("--run", r_run, "Run directory")->required()->check(CLI::ExistingDirectory), "RUN");
    env_option(rank->add_option("--out", r_out, "Ranking JSON (default: stdout)"), "OUT");
    add_ranking_flags(rank, rf);
    rf.opts["embed-url"] = env_option(rank->add_option("--embed-url", rf.embed_url, "Embedding service endpoint"),
                                      "EMBED_URL");
    rf.opts["api-key"] = env_option(rank->add_option("--api-key", rf.api_key, "Bearer token"), "API_KEY");
    rf.opts["mock"] = env_option(rank->add_flag("--mock", rf.mock, "Use the mock embedder"), "MOCK");

    // report
    std::vector<std::string> p_inputs;
    std::string p_out;
    auto* report = app.add_subcommand("report", "Render per-missing-rate F1 | mAP | SS tables");
    env_option(report->add_option("inputs", p_inputs, "Evaluation JSON files")->required()->check(CLI::ExistingFile),
               "INPUTS");
    env_option(report->add_option("--out", p_out, "Markdown file (default: stdout)"), "OUT");

    // replay
    ConfigFlags yf;
    std::string y_run;
    auto* replay = app.add_subcommand("replay", "Recompute every stored score of a run and compare");
    env_option(replay->add_option("--run", y_run, "Run directory")->required()->check(CLI::ExistingDirectory), "RUN");
    yf.opts["embed-url"] = env_option(replay->add_option("--embed-url", yf.embed_url, "Embedding service endpoint"),
                                      "EMBED_URL");
    yf.opts["api-key"] = env_option(replay->add_option("--api-key", yf.api_key, "Bearer token"), "API_KEY");

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForVersion& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return 2;
    }

    kbc::kernels::set_threads(threads);
    std::signal(SIGINT, on_sigint);

    // embedder for commands that only score: the run's own endpoint unless overridden
    auto embedder_for = [](const ConfigFlags& f, kbc::BackendConfig base) {
        if (f.mock) base.embed_url = std::string(kbc::kMockUrl);
        if (given(f, "embed-url")) base.embed_url = f.embed_url;
        if (given(f, "api-key")) base.api_key = f.api_key;
        base.chat_url = base.image_url = std::string(kbc::kMockUrl);
        return kbc::make_backends(base);
    };

    try {
        if (*complete) {
            const kbc::Manifest manifest = kbc::load_manifest(c_manifest);
            const kbc::PipelineConfig config = build_config(cf);
            const kbc::MissingMask mask = c_mask.empty() ? kbc::cmd_simulate(manifest, config.eta, config.seed)
                                                         : kbc::MissingMask::from_json(read_json_file(c_mask));
            std::string run_id = c_run_id;
            if (run_id.empty()) {
                const std::string base = kbc::default_run_id(config, mask);
                run_id = base;
                for (int k = 2; fs::exists(fs::path(c_out) / run_id); ++k) run_id = base + "-" + std::to_string(k);
            }
            const auto result = kbc::cmd_complete(manifest, mask, config, c_out, run_id);
            std::cout << result.run_dir.string() << "\n";
            std::cerr << "completed " << result.completed << " of " << result.attempted << " sample(s)"
                      << (result.interrupted ? " (interrupted)" : "") << "\n";
            print_error_table(result.errors);
            return result.exit_code;
        }
        if (*simulate) {
            const kbc::Manifest manifest = kbc::load_manifest(s_manifest);
            write_output(s_out, kbc::cmd_simulate(manifest, s_eta, s_seed).to_json().dump(2) + "\n");
            return 0;
        }
        if (*evaluate) {
            if (e_gold.empty() && e_manifest.empty()) throw UsageError("evaluate needs --gold or --manifest");
            if (!e_run.empty() && e_manifest.empty()) throw UsageError("--run needs --manifest for the ground truth");
            const auto pred = kbc::read_prediction_csv(fs::path(e_pred));
            std::optional<kbc::Manifest> manifest;
            if (!e_manifest.empty()) manifest = kbc::load_manifest(e_manifest);
            const auto gold = e_gold.empty() ? kbc::gold_table(*manifest) : kbc::read_gold_csv(fs::path(e_gold));
            kbc::EvalResult r = kbc::cmd_evaluate(pred, gold, e_eta, e_seed,
                                                  !e_dataset.empty() ? e_dataset
                                                  : manifest         ? manifest->dataset_id
                                                                     : std::string{});
            if (!e_run.empty()) {
                const kbc::RunRecord run = kbc::load_run(e_run);
                auto backends = embedder_for(ef, kbc::config_from_run(run).backends);
                r.ss = kbc::run_similarity(run, *manifest, backends.embed());
            }
            write_output(e_out, r.to_json().dump(2) + "\n");
            if (!e_out.empty() && e_out != "-") std::cout << kbc::cmd_report({r});
            return 0;
        }
        if (*extract) {
            const kbc::Manifest manifest = kbc::load_manifest(x_manifest);
            kbc::PipelineConfig config = build_config(xf);
            auto backends = kbc::make_backends(config.backends, config.cache ? (config.cache_dir.empty()
                                                                                    ? fs::path("runs") / "cache"
                                                                                    : config.cache_dir)
                                                                             : fs::path{});
            const auto outputs = kbc::cmd_extract(manifest, x_samples, config, backends.chat(), backends.image());
            json j = json::array();
            bool failed = false;
            for (const auto& o : outputs) {
                j.push_back(kbc::to_json(o));
                failed |= !o.error.empty();
            }
            write_output(x_out, j.dump(2) + "\n");
            return failed ? 1 : 0;
        }
        if (*rank) {
            const kbc::RunRecord run = kbc::load_run(r_run);
            const kbc::PipelineConfig stored = kbc::config_from_run(run);
            const kbc::Weights w = given(rf, "weights") ? kbc::parse_weights(rf.weights) : stored.weights;
            const kbc::ScoreMode m = given(rf, "graph-mode") ? kbc::parse_score_mode(rf.graph_mode) : stored.mode;
            auto backends = embedder_for(rf, stored.backends);
            json j = json::array();
            bool failed = false;
            for (const auto& o : kbc::cmd_rank(run, w, m, backends.embed())) {
                json e{{"sample_id", o.sample_id}, {"stored_best", o.stored_best}};
                if (o.error.empty()) {
                    e["best"] = o.best;
                    e["ranking"] = kbc::to_json(o.ranking);
                } else {
                    e["error"] = o.error;
                    failed = true;
                }
                j.push_back(e);
            }
            write_output(r_out, j.dump(2) + "\n");
            return failed ? 1 : 0;
        }
        if (*report) {
            std::vector<kbc::EvalResult> results;
            for (const auto& p : p_inputs) {
                const json j = read_json_file(p);
                if (j.is_array())
                    for (const auto& e : j) results.push_back(kbc::EvalResult::from_json(e));
                else
                    results.push_back(kbc::EvalResult::from_json(j));
            }
            write_output(p_out, kbc::cmd_report(results));
            return 0;
        }
        if (*replay) {
            const kbc::RunRecord run = kbc::load_run(y_run);
            auto backends = embedder_for(yf, kbc::config_from_run(run).backends);
            const auto r = kbc::cmd_replay(y_run, backends.embed());
            std::cout << "replayed " << r.items.size() << " score(s)\n";
            for (const auto& p : r.problems) std::cerr << "mismatch: " << p << "\n";
            return r.ok() ? 0 : 1;
        }
    } catch (const UsageError& e) {
        std::cerr << "usage error: " << e.what() << "\n";
        return 2;
    } catch (const kbc::Error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 2;
}
