#include "kbc/store.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <set>
#include <sstream>

#include "kbc/error.hpp"

namespace kbc {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

std::string read_file(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    if (!in) throw Error(Errc::IoError, "cannot read " + p.string());
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

void write_file(const fs::path& p, std::string_view bytes) {
    std::ofstream out(p, std::ios::binary | std::ios::trunc);
    if (!out) throw Error(Errc::IoError, "cannot write " + p.string());
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw Error(Errc::IoError, "short write to " + p.string());
}

void write_new_file(const fs::path& p, std::string_view bytes) {
    if (fs::exists(p)) throw Error(Errc::Precondition, p.string() + " already persisted");
    write_file(p, bytes);
}

json read_json(const fs::path& p) {
    try {
        return json::parse(read_file(p));
    } catch (const json::parse_error& e) {
        throw Error(Errc::ParseError, p.string() + ": " + e.what());
    }
}

std::string dump(const json& j) { return j.dump(2) + "\n"; }

}  // namespace

// ---------------------------------------------------------------------------
// manifests

const Sample* Manifest::find(std::string_view id) const {
    for (const auto& s : samples)
        if (s.id == id) return &s;
    return nullptr;
}

std::vector<std::string> Manifest::ids() const {
    std::vector<std::string> out;
    for (const auto& s : samples) out.push_back(s.id);
    return out;
}

Manifest load_manifest(const fs::path& path) {
    if (!fs::exists(path)) throw Error(Errc::MissingFile, path.string());
    const json j = read_json(path);
    const fs::path base = path.parent_path();
    Manifest m;
    try {
        m.dataset_id = j.at("dataset_id").get<std::string>();
        m.domain = parse_domain(j.value("domain", std::string("general")));
        m.label_names = j.at("label_names").get<std::vector<std::string>>();
        std::set<std::string> seen_labels;
        for (const auto& l : m.label_names)
            if (l.empty() || !seen_labels.insert(l).second)
                throw Error(Errc::ParseError, "label names must be non-empty and unique");

        std::set<std::string> seen;
        for (const auto& s : j.at("samples")) {
            Sample sample;
            sample.id = s.at("id").get<std::string>();
            sample.domain = m.domain;
            if (sample.id.empty() || sample.id.find_first_of(",\n\r") != std::string::npos)
                throw Error(Errc::ParseError, "sample ids must be non-empty without commas or newlines");
            if (!seen.insert(sample.id).second) throw Error(Errc::ParseError, "duplicate sample id '" + sample.id + "'");

            std::string ref;
            if (s.contains("image") && !s["image"].is_null()) {
                ref = s["image"].get<std::string>();
                const fs::path p = base / ref;
                if (!fs::exists(p)) throw Error(Errc::MissingFile, sample.id);
                std::string bytes = read_file(p);
                const auto format = sniff_image_format(bytes);
                if (!format) throw Error(Errc::ParseError, sample.id + ": " + ref + " is not a PNG or JPEG image");
                sample.image = Payload::image(std::move(bytes), *format);
            }
            if (s.contains("text") && !s["text"].is_null()) sample.text = s["text"].get<std::string>();
            if (!sample.image && !sample.text) throw Error(Errc::ParseError, sample.id + ": sample has no modality");

            sample.labels.assign(m.label_names.size(), 0);
            for (const auto& name : s.value("labels", json::array())) {
                const auto it = std::find(m.label_names.begin(), m.label_names.end(), name.get<std::string>());
                if (it == m.label_names.end())
                    throw Error(Errc::ParseError, sample.id + ": unknown label '" + name.get<std::string>() + "'");
                sample.labels[static_cast<std::size_t>(it - m.label_names.begin())] = 1;
            }
            m.samples.push_back(std::move(sample));
            m.image_refs.push_back(ref);
        }
    } catch (const json::exception& e) {
        throw Error(Errc::ParseError, path.string() + ": " + e.what());
    }
    return m;
}

void write_manifest(const Manifest& m, const fs::path& dir) {
    fs::create_directories(dir / "images");
    json samples = json::array();
    for (const auto& s : m.samples) {
        json e{{"id", s.id}};
        if (s.image) {
            const std::string ref = "images/" + safe_name(s.id) + payload_extension(*s.image);
            write_file(dir / ref, s.image->bytes);
            e["image"] = ref;
        }
        if (s.text) e["text"] = *s.text;
        json labels = json::array();
        for (std::size_t i = 0; i < m.label_names.size() && i < s.labels.size(); ++i)
            if (s.labels[i]) labels.push_back(m.label_names[i]);
        e["labels"] = labels;
        samples.push_back(e);
    }
    const json j{{"dataset_id", m.dataset_id},
                 {"domain", domain_name(m.domain)},
                 {"label_names", m.label_names},
                 {"samples", samples}};
    write_file(dir / "manifest.json", dump(j));
}

GoldTable gold_table(const Manifest& m) {
    GoldTable g{m.label_names, m.ids(), {}};
    for (const auto& s : m.samples) g.labels.insert(g.labels.end(), s.labels.begin(), s.labels.end());
    return g;
}

// ---------------------------------------------------------------------------
// formatting helpers

std::string format_double(double v) {
    if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
    if (std::isnan(v)) return "nan";
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.9g", v);
    return buf;
}

std::string safe_name(std::string_view id) {
    std::string out;
    bool changed = id.empty();
    for (char c : id) {
        const bool ok = (c >= 'a' && c <= 'z') || (c >= 'A' && c <= 'Z') || (c >= '0' && c <= '9') || c == '-' ||
                        c == '_' || c == '.';
        out.push_back(ok ? c : '_');
        changed |= !ok;
    }
    if (out.front() == '.') {
        out.front() = '_';
        changed = true;
    }
    if (changed) out += "-" + sha256_hex(id).substr(0, 8);
    return out;
}

std::string payload_extension(const Payload& p) {
    if (p.modality == Modality::Text) return ".txt";
    return p.format == ImageFormat::Png ? ".png" : ".jpg";
}

std::optional<std::size_t> SampleRecord::chosen() const {
    if (!completed()) return std::nullopt;
    return ranking->best_index;
}

// ---------------------------------------------------------------------------
// ranking JSON

json to_json(const Ranking& r) {
    json entries = json::array();
    for (const auto& e : r.entries) {
        json je{{"position", e.position}};
        je["score"] = e.score ? to_json(*e.score) : json(nullptr);
        if (!e.error.empty()) je["error"] = e.error;
        entries.push_back(je);
    }
    return json{{"entries", entries}, {"order", r.order}, {"best_index", r.best_index}};
}

Ranking ranking_from_json(const json& j) {
    Ranking r;
    for (const auto& je : j.at("entries")) {
        RankEntry e;
        e.position = je.at("position").get<std::size_t>();
        e.error = je.value("error", std::string{});
        if (!je.at("score").is_null()) {
            const json& s = je["score"];
            QualityScore q;
            q.graph_term = s.at("graph_term").get<double>();
            q.clip_term = s.at("clip_term").get<double>();
            q.blip_term = s.at("blip_term").get<double>();
            q.total = s.at("total").get<double>();
            q.mode = parse_score_mode(s.at("mode").get<std::string>());
            const auto w = s.at("weights").get<std::vector<double>>();
            if (w.size() != 3) throw Error(Errc::ParseError, "weights must have three entries");
            q.weights = Weights{w[0], w[1], w[2]};
            e.score = q;
        }
        r.entries.push_back(std::move(e));
    }
    r.order = j.at("order").get<std::vector<std::size_t>>();
    r.best_index = j.at("best_index").get<std::size_t>();
    return r;
}

// ---------------------------------------------------------------------------
// run writer

namespace {

const char* const kScoresHeader = "sample_id,candidate_index,graph_term,clip_term,blip_term,total,chosen\n";

json payload_ref(const Payload& p, const std::string& file) {
    json j{{"file", file}, {"modality", modality_name(p.modality)}};
    if (p.modality == Modality::Image) j["format"] = image_format_name(p.format);
    return j;
}

Payload load_payload(const fs::path& dir, const json& ref) {
    Payload p;
    p.modality = parse_modality(ref.at("modality").get<std::string>());
    p.bytes = read_file(dir / ref.at("file").get<std::string>());
    if (p.modality == Modality::Image) p.format = parse_image_format(ref.at("format").get<std::string>());
    return p;
}

std::string markdown_cell(std::string s) {
    for (char& c : s)
        if (c == '|' || c == '\n' || c == '\r') c = ' ';
    if (s.size() > 160) s = s.substr(0, 157) + "...";
    return s;
}

}  // namespace

RunWriter::RunWriter(const fs::path& root, const std::string& run_id, const json& config)
    : dir_(root / run_id), run_id_(run_id), config_(config) {
    if (run_id.empty() || safe_name(run_id) != run_id)
        throw Error(Errc::Precondition, "run id must be a plain file name: '" + run_id + "'");
    std::error_code ec;
    fs::create_directories(root, ec);
    if (ec) throw Error(Errc::IoError, root.string() + ": " + ec.message());
    if (!fs::create_directory(dir_, ec)) {
        if (!ec) throw Error(Errc::RunExists, dir_.string());
        throw Error(Errc::IoError, dir_.string() + ": " + ec.message());
    }
    for (const char* sub : {"transcripts", "graphs", "candidates", "chosen"}) {
        fs::create_directory(dir_ / sub, ec);
        if (ec) throw Error(Errc::IoError, (dir_ / sub).string() + ": " + ec.message());
    }
    write_file(dir_ / "config.json", dump(json{{"run_id", run_id}, {"config", config}}));
}

void RunWriter::append(const SampleRecord& rec) {
    std::lock_guard lock(mu_);
    if (finalized_) throw Error(Errc::Precondition, "run already finalized");
    for (const auto& s : done_)
        if (s.sample_id == rec.sample_id) throw Error(Errc::Precondition, "sample '" + rec.sample_id + "' already persisted");

    const std::string name = safe_name(rec.sample_id);

    json transcript = json::array();
    for (const auto& e : rec.transcript) transcript.push_back(to_json(e));
    write_new_file(dir_ / "transcripts" / (name + ".json"),
                   dump(json{{"sample_id", rec.sample_id}, {"exchanges", transcript}}));

    json graphs{{"sample_id", rec.sample_id}};
    if (rec.knowledge) {
        graphs["structured"] = to_json(rec.knowledge->structured);
        graphs["available"] = to_json(rec.knowledge->graph);
        graphs["repairs"] = rec.knowledge->repairs;
    }
    if (rec.candidates) {
        json cg = json::array();
        for (const auto& c : rec.candidates->candidates) {
            json e{{"index", c.index}, {"graph", to_json(c.graph)}};
            if (!c.graph_error.empty()) e["graph_error"] = c.graph_error;
            cg.push_back(e);
        }
        graphs["candidates"] = cg;
    }
    write_new_file(dir_ / "graphs" / (name + ".json"), dump(graphs));

    const fs::path cdir = dir_ / "candidates" / name;
    fs::create_directory(cdir);
    json index{{"sample_id", rec.sample_id},
               {"missing", modality_name(rec.missing)},
               {"status", rec.completed() ? "completed" : "failed"}};
    if (!rec.error.empty()) index["error"] = rec.error;
    if (rec.available) {
        const std::string file = "available" + payload_extension(*rec.available);
        write_new_file(cdir / file, rec.available->bytes);
        index["available"] = payload_ref(*rec.available, file);
    }
    if (rec.candidates) {
        json list = json::array();
        for (const auto& c : rec.candidates->candidates) {
            const std::string file = std::to_string(c.index) + payload_extension(c.payload);
            write_new_file(cdir / file, c.payload.bytes);
            json e = payload_ref(c.payload, file);
            e["index"] = c.index;
            e["description"] = c.description;
            e["seed"] = c.seed;
            list.push_back(e);
        }
        index["candidates"] = list;
        json failures = json::array();
        for (const auto& [i, why] : rec.candidates->failures) failures.push_back({{"index", i}, {"error", why}});
        index["generation_failures"] = failures;
        index["short_list"] = rec.candidates->short_list;
    }
    if (rec.ranking) index["ranking"] = to_json(*rec.ranking);
    write_new_file(cdir / "index.json", dump(index));

    if (auto best = rec.chosen()) {
        const Candidate& c = rec.candidates->candidates.at(*best);
        write_new_file(dir_ / "chosen" / (name + payload_extension(c.payload)), c.payload.bytes);
    }

    Summary summary{rec.sample_id, rec.missing, rec.error, rec.ranking, {},
                    rec.candidates ? rec.candidates->failures.size() : 0, rec.seconds};
    if (rec.candidates)
        for (const auto& c : rec.candidates->candidates) summary.candidate_indices.push_back(c.index);
    done_.push_back(std::move(summary));
}

fs::path RunWriter::finalize(bool interrupted) {
    std::lock_guard lock(mu_);
    if (finalized_) throw Error(Errc::Precondition, "run already finalized");
    finalized_ = true;
    std::vector<const Summary*> rows;
    for (const auto& s : done_) rows.push_back(&s);
    std::sort(rows.begin(), rows.end(), [](auto* a, auto* b) { return a->sample_id < b->sample_id; });

    std::string csv = kScoresHeader;
    for (const Summary* s : rows) {
        if (!s->ranking) continue;
        for (const auto& e : s->ranking->entries) {
            const std::size_t index =
                e.position < s->candidate_indices.size() ? s->candidate_indices[e.position] : e.position;
            csv += s->sample_id + "," + std::to_string(index) + ",";
            if (e.score)
                csv += format_double(e.score->graph_term) + "," + format_double(e.score->clip_term) + "," +
                       format_double(e.score->blip_term) + "," + format_double(e.score->total);
            else
                csv += "nan,nan,nan,-inf";
            csv += e.position == s->ranking->best_index ? ",1\n" : ",0\n";
        }
    }
    write_file(dir_ / "scores.csv", csv);

    std::size_t completed = 0;
    double seconds = 0.0;
    for (const Summary* s : rows) {
        completed += s->error.empty() && s->ranking ? 1 : 0;
        seconds += s->seconds;
    }
    std::ostringstream md;
    md << "# Run " << run_id_ << "\n\n";
    md << "- samples processed: " << rows.size() << "\n";
    md << "- completed: " << completed << "\n";
    md << "- failed: " << rows.size() - completed << "\n";
    if (interrupted) md << "- interrupted before all samples were processed\n";
    md << "- total sample time: " << format_double(seconds) << " s\n";
    if (config_.contains("ranking"))
        md << "- ranking: " << config_["ranking"].dump() << "\n";
    md << "\n## Completions\n\n";
    md << "| sample | missing | candidates | chosen | total | seconds |\n";
    md << "|---|---|---|---|---|---|\n";
    for (const Summary* s : rows) {
        md << "| " << markdown_cell(s->sample_id) << " | " << modality_name(s->missing) << " | "
           << s->candidate_indices.size() << " | ";
        if (s->error.empty() && s->ranking)
            md << s->candidate_indices.at(s->ranking->best_index) << " | "
               << format_double(s->ranking->entries[s->ranking->best_index].total());
        else
            md << "- | -";
        md << " | " << format_double(s->seconds) << " |\n";
    }
    bool any_error = false;
    for (const Summary* s : rows) any_error |= !s->error.empty() || s->generation_failures > 0;
    if (any_error) {
        md << "\n## Errors\n\n| sample | error |\n|---|---|\n";
        for (const Summary* s : rows) {
            if (!s->error.empty()) md << "| " << markdown_cell(s->sample_id) << " | " << markdown_cell(s->error) << " |\n";
            else if (s->generation_failures > 0)
                md << "| " << markdown_cell(s->sample_id) << " | " << s->generation_failures
                   << " candidate(s) failed to generate |\n";
        }
    }
    write_file(dir_ / "report.md", md.str());
    return dir_;
}

fs::path persist_run(const RunRecord& record, const fs::path& root) {
    RunWriter w(root, record.run_id, record.config);
    for (const auto& s : record.samples) w.append(s);
    return w.finalize(record.interrupted);
}

// ---------------------------------------------------------------------------
// loading

RunRecord load_run(const fs::path& dir) {
    if (!fs::is_directory(dir)) throw Error(Errc::MissingFile, dir.string());
    RunRecord run;
    const json cfg = read_json(dir / "config.json");
    run.run_id = cfg.at("run_id").get<std::string>();
    run.config = cfg.at("config");

    std::vector<fs::path> sample_dirs;
    for (const auto& entry : fs::directory_iterator(dir / "candidates"))
        if (entry.is_directory()) sample_dirs.push_back(entry.path());
    std::sort(sample_dirs.begin(), sample_dirs.end());

    try {
        for (const auto& cdir : sample_dirs) {
            const json index = read_json(cdir / "index.json");
            const std::string name = cdir.filename().string();
            SampleRecord rec;
            rec.sample_id = index.at("sample_id").get<std::string>();
            rec.missing = parse_modality(index.at("missing").get<std::string>());
            rec.error = index.value("error", std::string{});
            if (index.contains("available")) rec.available = load_payload(cdir, index["available"]);

            const fs::path tpath = dir / "transcripts" / (name + ".json");
            if (fs::exists(tpath)) {
                const json t = read_json(tpath);
                for (const auto& e : t.at("exchanges")) rec.transcript.push_back(exchange_from_json(e));
            }

            json graphs = json::object();
            const fs::path gpath = dir / "graphs" / (name + ".json");
            if (fs::exists(gpath)) graphs = read_json(gpath);
            if (graphs.contains("available")) {
                KnowledgeResult k;
                k.graph = graph_from_json(graphs["available"]);
                const Domain d = k.graph.structured() ? k.graph.structured()->domain : Domain::General;
                k.structured = structured_from_json(graphs.at("structured"), d);
                k.structured.domain = d;
                k.repairs = graphs.value("repairs", std::size_t{0});
                rec.knowledge = std::move(k);
            }

            if (index.contains("candidates")) {
                CandidateSet set;
                set.target = rec.missing;
                if (rec.knowledge) set.source_graph = rec.knowledge->graph;
                set.short_list = index.value("short_list", false);
                for (const auto& f : index.value("generation_failures", json::array()))
                    set.failures.emplace_back(f.at("index").get<std::size_t>(), f.at("error").get<std::string>());
                const json cgraphs = graphs.value("candidates", json::array());
                for (const auto& ref : index["candidates"]) {
                    Candidate c;
                    c.index = ref.at("index").get<std::size_t>();
                    c.payload = load_payload(cdir, ref);
                    c.description = ref.value("description", std::string{});
                    c.seed = ref.value("seed", std::int64_t{0});
                    for (const auto& g : cgraphs) {
                        if (g.at("index").get<std::size_t>() != c.index) continue;
                        c.graph = graph_from_json(g.at("graph"));
                        c.graph_error = g.value("graph_error", std::string{});
                    }
                    set.candidates.push_back(std::move(c));
                }
                rec.candidates = std::move(set);
            }
            if (index.contains("ranking")) rec.ranking = ranking_from_json(index["ranking"]);
            run.samples.push_back(std::move(rec));
        }
    } catch (const json::exception& e) {
        throw Error(Errc::ParseError, dir.string() + ": " + e.what());
    }
    std::sort(run.samples.begin(), run.samples.end(),
              [](const SampleRecord& a, const SampleRecord& b) { return a.sample_id < b.sample_id; });
    return run;
}

std::vector<ScoreRow> read_scores_csv(const fs::path& path) {
    std::istringstream in(read_file(path));
    std::string line;
    if (!std::getline(in, line) || line + "\n" != kScoresHeader)
        throw Error(Errc::ParseError, path.string() + ": unexpected scores header");
    std::vector<ScoreRow> rows;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        std::vector<std::string> f;
        std::size_t pos = 0;
        while (true) {
            const auto comma = line.find(',', pos);
            f.push_back(line.substr(pos, comma == std::string::npos ? std::string::npos : comma - pos));
            if (comma == std::string::npos) break;
            pos = comma + 1;
        }
        if (f.size() != 7) throw Error(Errc::ParseError, path.string() + ": row with " + std::to_string(f.size()) + " fields");
        rows.push_back(ScoreRow{f[0], std::stoul(f[1]), f[2], f[3], f[4], f[5], f[6] == "1"});
    }
    return rows;
}

}  // namespace kbc
