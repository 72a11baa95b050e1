#include "kbc/pipeline.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <ctime>
#include <map>
#include <sstream>

#include "kbc/error.hpp"

namespace kbc {

namespace fs = std::filesystem;
using nlohmann::json;

// ---------------------------------------------------------------------------
// config

void PipelineConfig::validate() const {
    auto fail = [](const std::string& what) { throw Error(Errc::Precondition, what); };
    if (!(eta >= 0.0 && eta <= 1.0)) throw Error(Errc::EtaOutOfRange, std::to_string(eta));
    if (n_candidates < 1) fail("n_candidates must be at least 1");
    if (object_count < 1) fail("object_count must be at least 1");
    if (kg_relationship_count < 1) fail("kg_relationship_count must be at least 1");
    if (workers < 1 || candidate_workers < 1) fail("worker counts must be at least 1");
    if (!(max_failure_fraction >= 0.0 && max_failure_fraction <= 1.0)) fail("max_failure_fraction must be in [0, 1]");
    for (double w : {weights.graph, weights.clip, weights.blip})
        if (!std::isfinite(w) || w < 0.0) fail("weights must be finite and non-negative");
    if (weights.graph + weights.clip + weights.blip == 0.0) fail("at least one weight must be positive");
    if (backends.timeout_s < 1) fail("timeout_s must be positive");
    if (backends.max_tokens < 1) fail("max_tokens must be positive");
    if (backends.context_window <= backends.max_tokens) fail("context_window must exceed max_tokens");
    for (const auto* url : {&backends.chat_url, &backends.embed_url, &backends.image_url}) {
        if (*url == kMockUrl) continue;
        if (url->rfind("http://", 0) != 0 && url->rfind("https://", 0) != 0)
            fail("backend URL must be http(s):// or " + std::string(kMockUrl) + ": '" + *url + "'");
    }
    if (!template_dir.empty() && !fs::is_directory(template_dir))
        throw Error(Errc::MissingFile, "template directory " + template_dir.string());
}

GenerationConfig PipelineConfig::generation() const {
    GenerationConfig g;
    g.n_candidates = n_candidates;
    g.object_count = object_count;
    g.kg_relationship_count = kg_relationship_count;
    g.repair_attempts = repair_attempts;
    g.base_seed = static_cast<std::int64_t>(seed);
    g.candidate_workers = candidate_workers;
    g.chat_model = backends.chat_model;
    g.temperature = backends.temperature;
    g.max_tokens = backends.max_tokens;
    g.general_generator = general_generator;
    g.medical_generator = medical_generator;
    return g;
}

json PipelineConfig::to_json() const {
    return json{{"backends", backends.to_json()},
                {"domain", domain ? json(domain_name(*domain)) : json(nullptr)},
                {"eta", eta},
                {"seed", seed},
                {"n_candidates", n_candidates},
                {"object_count", object_count},
                {"kg_relationship_count", kg_relationship_count},
                {"repair_attempts", repair_attempts},
                {"ranking", {{"weights", {weights.graph, weights.clip, weights.blip}}, {"mode", score_mode_name(mode)}}},
                {"workers", workers},
                {"candidate_workers", candidate_workers},
                {"cache", cache},
                {"cache_dir", cache_dir.string()},
                {"template_dir", template_dir.string()},
                {"max_failure_fraction", max_failure_fraction},
                {"generators", {{"general", general_generator}, {"medical", medical_generator}}}};
}

PipelineConfig PipelineConfig::from_json(const json& j) {
    PipelineConfig c;
    try {
        static const std::set<std::string> known{
            "backends",  "domain",  "eta",          "seed",         "n_candidates", "object_count",
            "kg_relationship_count", "repair_attempts", "ranking", "workers", "candidate_workers",
            "cache",     "cache_dir", "template_dir", "max_failure_fraction", "generators"};
        for (const auto& [k, v] : j.items())
            if (!known.count(k)) throw Error(Errc::ParseError, "unknown config key '" + k + "'");
        if (j.contains("backends")) c.backends = BackendConfig::from_json(j["backends"]);
        if (j.contains("domain") && !j["domain"].is_null()) c.domain = parse_domain(j["domain"].get<std::string>());
        c.eta = j.value("eta", c.eta);
        c.seed = j.value("seed", c.seed);
        c.n_candidates = j.value("n_candidates", c.n_candidates);
        c.object_count = j.value("object_count", c.object_count);
        c.kg_relationship_count = j.value("kg_relationship_count", c.kg_relationship_count);
        c.repair_attempts = j.value("repair_attempts", c.repair_attempts);
        if (j.contains("ranking")) {
            const json& r = j["ranking"];
            if (r.contains("weights")) {
                const auto w = r["weights"].get<std::vector<double>>();
                if (w.size() != 3) throw Error(Errc::ParseError, "ranking.weights needs three numbers");
                c.weights = Weights{w[0], w[1], w[2]};
            }
            if (r.contains("mode")) c.mode = parse_score_mode(r["mode"].get<std::string>());
        }
        c.workers = j.value("workers", c.workers);
        c.candidate_workers = j.value("candidate_workers", c.candidate_workers);
        c.cache = j.value("cache", c.cache);
        c.cache_dir = j.value("cache_dir", std::string{});
        c.template_dir = j.value("template_dir", std::string{});
        c.max_failure_fraction = j.value("max_failure_fraction", c.max_failure_fraction);
        if (j.contains("generators")) {
            c.general_generator = j["generators"].value("general", c.general_generator);
            c.medical_generator = j["generators"].value("medical", c.medical_generator);
        }
    } catch (const json::exception& e) {
        throw Error(Errc::ParseError, std::string("config: ") + e.what());
    }
    return c;
}

std::atomic<bool>& interrupt_flag() {
    static std::atomic<bool> flag{false};
    return flag;
}

std::string default_run_id(const PipelineConfig& config, const MissingMask& mask) {
    const std::time_t now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
    std::tm tm{};
    gmtime_r(&now, &tm);
    char stamp[32];
    std::strftime(stamp, sizeof stamp, "%Y%m%d-%H%M%S", &tm);
    return std::string("run-") + stamp + "-" + sha256_hex(config.to_json().dump() + mask.to_json().dump()).substr(0, 8);
}

// ---------------------------------------------------------------------------
// complete

std::vector<std::pair<const Sample*, Modality>> completion_targets(const Manifest& manifest, const MissingMask& mask) {
    for (const auto& [id, m] : mask.entries) {
        const Sample* s = manifest.find(id);
        if (!s) throw Error(Errc::Precondition, "mask names sample '" + id + "' that is not in the manifest");
        if (!s->has(m))
            throw Error(Errc::Precondition, "mask withholds the " + std::string(modality_name(m)) + " of '" + id +
                                                "', which the sample does not have");
    }
    std::vector<std::pair<const Sample*, Modality>> out;
    for (const auto& s : manifest.samples) {
        if (auto it = mask.entries.find(s.id); it != mask.entries.end()) out.emplace_back(&s, it->second);
        else if (!s.image) out.emplace_back(&s, Modality::Image);
        else if (!s.text) out.emplace_back(&s, Modality::Text);
    }
    return out;
}

namespace {

TemplateLibrary load_templates(const PipelineConfig& c) {
    return TemplateLibrary::load(c.template_dir.empty() ? TemplateLibrary::default_dir() : c.template_dir);
}

json run_snapshot(const Manifest& manifest, const MissingMask& mask, const PipelineConfig& config) {
    json snap = config.to_json();
    snap["mask"] = mask.to_json();
    snap["manifest"] = {{"dataset_id", manifest.dataset_id},
                        {"domain", domain_name(manifest.domain)},
                        {"samples", manifest.samples.size()}};
    return snap;
}

SampleRecord complete_one(const Sample& original, Modality missing, const Completer& completer,
                          const PipelineConfig& config, EmbeddingBackend& embedder) {
    const auto start = std::chrono::steady_clock::now();
    SampleRecord rec;
    rec.sample_id = original.id;
    rec.missing = missing;
    const Sample sample = original.has(missing) ? original.without(missing) : original;
    rec.available = sample.payload(missing == Modality::Image ? Modality::Text : Modality::Image);
    try {
        if (!rec.available) throw Error(Errc::Precondition, "sample has no available modality");
        rec.knowledge = completer.extract_knowledge(sample, rec.transcript);
        rec.candidates = completer.generate_candidates(sample, missing, *rec.knowledge, rec.transcript);
        rec.ranking = rank_candidates(*rec.available, rec.knowledge->graph, rec.candidates->candidates,
                                      config.weights, config.mode, embedder);
    } catch (const Error& e) {
        rec.error = e.what();
    }
    rec.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    return rec;
}

}  // namespace

CompleteResult cmd_complete(const Manifest& manifest, const MissingMask& mask, const PipelineConfig& config,
                            const fs::path& out_root, const std::string& run_id) {
    config.validate();
    const fs::path cache_dir = !config.cache ? fs::path{} : config.cache_dir.empty() ? out_root / "cache" : config.cache_dir;
    BackendSet set = make_backends(config.backends, cache_dir);
    return cmd_complete(manifest, mask, config, out_root, run_id, BackendRefs{set.chat(), set.embed(), set.image()});
}

CompleteResult cmd_complete(const Manifest& manifest, const MissingMask& mask, const PipelineConfig& config,
                            const fs::path& out_root, const std::string& run_id, BackendRefs backends) {
    config.validate();
    if (config.domain && *config.domain != manifest.domain)
        throw Error(Errc::Precondition, "config domain '" + std::string(domain_name(*config.domain)) +
                                            "' does not match the manifest's '" +
                                            std::string(domain_name(manifest.domain)) + "'");
    const auto targets = completion_targets(manifest, mask);
    const TemplateLibrary templates = load_templates(config);
    const Completer completer(templates, backends.chat, backends.image, config.generation());

    RunWriter writer(out_root, run_id, run_snapshot(manifest, mask, config));
    CompleteResult result;
    result.run_dir = writer.dir();
    std::mutex mu;
    std::vector<std::uint8_t> done(targets.size(), 0);

    parallel_for_index(targets.size(), config.workers, [&](std::size_t i) {
        if (interrupt_flag().load()) return;
        const auto& [sample, missing] = targets[i];
        SampleRecord rec = complete_one(*sample, missing, completer, config, backends.embed);
        writer.append(rec);
        std::lock_guard lock(mu);
        done[i] = 1;
        if (!rec.error.empty()) result.errors.emplace_back(rec.sample_id, rec.error);
    });

    result.interrupted = std::count(done.begin(), done.end(), 1) != static_cast<std::ptrdiff_t>(done.size());
    result.attempted = static_cast<std::size_t>(std::count(done.begin(), done.end(), 1));
    result.completed = result.attempted - result.errors.size();
    std::sort(result.errors.begin(), result.errors.end());
    writer.finalize(result.interrupted);

    const double failed = targets.empty() ? 0.0 : static_cast<double>(result.errors.size()) / targets.size();
    result.exit_code = result.interrupted || failed > config.max_failure_fraction ? 1 : 0;
    return result;
}

MissingMask cmd_simulate(const Manifest& manifest, double eta, std::uint64_t seed) {
    // only samples with both modalities can have one withheld
    std::vector<std::string> ids;
    for (const auto& s : manifest.samples)
        if (s.image && s.text) ids.push_back(s.id);
    return simulate_missing(ids, eta, seed);
}

// ---------------------------------------------------------------------------
// evaluate / report

json EvalResult::to_json() const {
    json j{{"dataset_id", dataset_id}, {"eta", eta}, {"seed", seed}, {"samples", samples}, {"f1", f1}, {"map", map}};
    j["ss"] = ss ? json(*ss) : json(nullptr);
    return j;
}

EvalResult EvalResult::from_json(const json& j) {
    EvalResult r;
    try {
        r.dataset_id = j.value("dataset_id", std::string{});
        r.eta = j.at("eta").get<double>();
        r.seed = j.at("seed").get<std::uint64_t>();
        r.samples = j.value("samples", std::size_t{0});
        r.f1 = j.at("f1").get<double>();
        r.map = j.at("map").get<double>();
        if (j.contains("ss") && !j["ss"].is_null()) r.ss = j["ss"].get<double>();
    } catch (const json::exception& e) {
        throw Error(Errc::ParseError, std::string("evaluation: ") + e.what());
    }
    return r;
}

EvalResult cmd_evaluate(const PredictionTable& pred, const GoldTable& gold, double eta, std::uint64_t seed,
                        const std::string& dataset_id) {
    EvalResult r;
    r.dataset_id = dataset_id;
    r.eta = eta;
    r.seed = seed;
    r.samples = pred.rows();
    r.f1 = macro_f1(pred, gold);
    r.map = mean_ap(pred, gold);
    return r;
}

double run_similarity(const RunRecord& run, const Manifest& manifest, EmbeddingBackend& embedder) {
    std::vector<SimilarityPair> pairs;
    for (const auto& rec : run.samples) {
        const auto best = rec.chosen();
        if (!best) continue;
        const Sample* s = manifest.find(rec.sample_id);
        if (!s) throw Error(Errc::Precondition, "run sample '" + rec.sample_id + "' is not in the manifest");
        auto truth = s->payload(rec.missing);
        if (!truth) continue;
        pairs.push_back(SimilarityPair{std::move(*truth), rec.candidates->candidates.at(*best).payload});
    }
    if (pairs.empty()) throw Error(Errc::Precondition, "run has no completed sample with a ground truth");
    return similarity_score(pairs, embedder);
}

std::string cmd_report(const std::vector<EvalResult>& results) {
    std::map<std::string, std::map<double, std::vector<const EvalResult*>>> groups;
    for (const auto& r : results) groups[r.dataset_id][r.eta].push_back(&r);
    auto cell = [](double v) {
        char buf[32];
        std::snprintf(buf, sizeof buf, "%.2f", v);
        return std::string(buf);
    };
    std::ostringstream md;
    md << "# Evaluation\n";
    for (auto& [dataset, by_eta] : groups) {
        for (auto& [eta, rows] : by_eta) {
            std::stable_sort(rows.begin(), rows.end(), [](auto* a, auto* b) { return a->seed < b->seed; });
            md << "\n## " << (dataset.empty() ? std::string("results") : dataset) << ", missing rate "
               << format_double(eta) << "\n\n";
            md << "| seed | F1 | mAP | SS |\n|---|---|---|---|\n";
            double f1 = 0, map = 0, ss = 0;
            std::size_t n_ss = 0;
            for (const auto* r : rows) {
                md << "| " << r->seed << " | " << cell(r->f1) << " | " << cell(r->map) << " | "
                   << (r->ss ? cell(*r->ss) : "-") << " |\n";
                f1 += r->f1;
                map += r->map;
                if (r->ss) {
                    ss += *r->ss;
                    ++n_ss;
                }
            }
            const double n = static_cast<double>(rows.size());
            md << "| mean | " << cell(f1 / n) << " | " << cell(map / n) << " | "
               << (n_ss ? cell(ss / static_cast<double>(n_ss)) : "-") << " |\n";
        }
    }
    return md.str();
}

// ---------------------------------------------------------------------------
// extract / rank / replay

std::vector<ExtractOutput> cmd_extract(const Manifest& manifest, const std::vector<std::string>& ids,
                                       const PipelineConfig& config, ChatBackend& chat, ImageBackend& images) {
    config.validate();
    const TemplateLibrary templates = load_templates(config);
    const Completer completer(templates, chat, images, config.generation());
    std::vector<const Sample*> picked;
    if (ids.empty()) {
        for (const auto& s : manifest.samples) picked.push_back(&s);
    } else {
        for (const auto& id : ids) {
            const Sample* s = manifest.find(id);
            if (!s) throw Error(Errc::Precondition, "sample '" + id + "' is not in the manifest");
            picked.push_back(s);
        }
    }
    std::vector<ExtractOutput> out(picked.size());
    parallel_for_index(picked.size(), config.workers, [&](std::size_t i) {
        out[i].sample_id = picked[i]->id;
        try {
            out[i].knowledge = completer.extract_knowledge(*picked[i], out[i].transcript);
        } catch (const Error& e) {
            out[i].error = e.what();
        }
    });
    return out;
}

json to_json(const ExtractOutput& o) {
    json j{{"sample_id", o.sample_id}};
    if (o.knowledge) {
        j["structured"] = to_json(o.knowledge->structured);
        j["graph"] = to_json(o.knowledge->graph);
        j["repairs"] = o.knowledge->repairs;
    }
    if (!o.error.empty()) j["error"] = o.error;
    return j;
}

std::vector<RankOutcome> cmd_rank(const RunRecord& run, Weights weights, ScoreMode mode, EmbeddingBackend& embedder) {
    std::vector<RankOutcome> out;
    for (const auto& rec : run.samples) {
        if (!rec.completed() || !rec.available || !rec.knowledge || !rec.candidates) continue;
        RankOutcome o;
        o.sample_id = rec.sample_id;
        o.stored_best = rec.ranking->best_index;
        try {
            o.ranking = rank_candidates(*rec.available, rec.knowledge->graph, rec.candidates->candidates, weights, mode,
                                        embedder);
            o.best = o.ranking.best_index;
        } catch (const Error& e) {
            o.error = e.what();
        }
        out.push_back(std::move(o));
    }
    return out;
}

PipelineConfig config_from_run(const RunRecord& run) {
    json j = run.config;
    j.erase("mask");
    j.erase("manifest");
    return PipelineConfig::from_json(j);
}

ReplayReport cmd_replay(const fs::path& run_dir, EmbeddingBackend& embedder) {
    const RunRecord run = load_run(run_dir);
    const PipelineConfig config = config_from_run(run);
    const auto rows = read_scores_csv(run_dir / "scores.csv");
    std::map<std::pair<std::string, std::size_t>, const ScoreRow*> by_key;
    for (const auto& r : rows) by_key[{r.sample_id, r.candidate_index}] = &r;

    ReplayReport report;
    std::size_t matched_rows = 0;
    const auto ranked = cmd_rank(run, config.weights, config.mode, embedder);
    for (const auto& o : ranked) {
        const SampleRecord& rec = *std::find_if(run.samples.begin(), run.samples.end(),
                                                [&](const SampleRecord& s) { return s.sample_id == o.sample_id; });
        if (!o.error.empty()) {
            report.problems.push_back(o.sample_id + ": " + o.error);
            continue;
        }
        if (o.best != o.stored_best)
            report.problems.push_back(o.sample_id + ": replay picks position " + std::to_string(o.best) +
                                      ", stored " + std::to_string(o.stored_best));
        for (const auto& e : o.ranking.entries) {
            const std::size_t index = rec.candidates->candidates.at(e.position).index;
            ReplayItem item{o.sample_id, index, "", format_double(e.total()), true};
            const auto it = by_key.find({o.sample_id, index});
            if (it == by_key.end()) {
                report.problems.push_back(o.sample_id + "#" + std::to_string(index) + ": missing from scores.csv");
                continue;
            }
            ++matched_rows;
            const ScoreRow& row = *it->second;
            item.stored_total = row.total;
            if (row.total != item.replayed_total)
                report.problems.push_back(o.sample_id + "#" + std::to_string(index) + ": stored total " + row.total +
                                          ", replayed " + item.replayed_total);
            if (e.score) {
                const double g = std::stod(row.graph_term), c = std::stod(row.clip_term), b = std::stod(row.blip_term);
                const double t = std::stod(row.total);
                const double sum = config.weights.graph * g + config.weights.clip * c + config.weights.blip * b;
                // the stored terms carry 9 significant digits
                item.decomposition_ok = std::abs(sum - t) <= 1e-8 * std::max(1.0, std::abs(t));
                if (!item.decomposition_ok)
                    report.problems.push_back(o.sample_id + "#" + std::to_string(index) +
                                              ": weighted terms do not add up to the total");
            }
            if (row.chosen != (e.position == o.stored_best))
                report.problems.push_back(o.sample_id + "#" + std::to_string(index) + ": chosen flag disagrees");
            report.items.push_back(std::move(item));
        }
    }
    if (matched_rows != rows.size())
        report.problems.push_back("scores.csv has " + std::to_string(rows.size() - matched_rows) +
                                  " row(s) without a replayable sample");
    return report;
}

}  // namespace kbc
