#include <algorithm>
#include <cctype>
#include <set>
#include <sstream>

#include "kbc/backends.hpp"
#include "kbc/error.hpp"

namespace kbc {

using nlohmann::json;

std::vector<std::string> content_tokens(std::string_view text) {
    static const std::set<std::string, std::less<>> kStop = {
        "a",  "an",   "the",   "of",   "with",  "and", "in",  "on",       "at",    "to",      "is",
        "are", "be",  "it",    "its",  "for",   "by",  "this", "that",    "there", "together", "photo",
        "showing", "as", "from", "into"};
    std::vector<std::string> out;
    std::string cur;
    auto flush = [&] {
        if (!cur.empty() && !kStop.contains(cur)) out.push_back(cur);
        cur.clear();
    };
    for (unsigned char c : text) {
        if (std::isalnum(c)) cur.push_back(static_cast<char>(std::tolower(c)));
        else flush();
    }
    flush();
    return out;
}

// ---------------------------------------------------------------------------
// ScriptedChatBackend

std::string ScriptedChatBackend::message_hash(const std::vector<ChatMessage>& messages) {
    return sha256_hex(to_digest_json(messages).dump());
}

void ScriptedChatBackend::on_hash(std::string hash, std::string response) {
    std::lock_guard lock(mu_);
    table_[std::move(hash)] = std::move(response);
}

ChatResponse ScriptedChatBackend::chat(const ChatRequest& req) {
    validate(req);
    std::size_t index = 0;
    std::optional<std::string> canned;
    {
        std::lock_guard lock(mu_);
        index = requests_.size();
        requests_.push_back(req);
        if (auto it = table_.find(message_hash(req.messages)); it != table_.end()) canned = it->second;
    }
    if (canned) return ChatResponse{*canned, estimate_prompt_tokens(req), 0, 1};
    if (!fallback_) throw Error(Errc::Transport, "scripted mock has no response for this request");
    return ChatResponse{fallback_(req, index), estimate_prompt_tokens(req), 0, 1};
}

std::size_t ScriptedChatBackend::calls() const {
    std::lock_guard lock(mu_);
    return requests_.size();
}

std::vector<ChatRequest> ScriptedChatBackend::requests() const {
    std::lock_guard lock(mu_);
    return requests_;
}

// ---------------------------------------------------------------------------
// MockChatBackend

namespace {

const std::vector<std::string>& general_nouns() {
    static const std::vector<std::string> v = {
        "man",   "woman", "child", "dog",  "cat",   "horse", "bicycle", "car",     "bus",   "umbrella",
        "kite",  "ball",  "bench", "tree", "table", "cup",   "pizza",   "boat",    "frisbee", "laptop",
        "bird",  "train", "clock", "chair", "skateboard", "grass", "street", "house", "window", "park",
        "branch", "road"};
    return v;
}

const std::vector<std::string>& adjectives() {
    static const std::vector<std::string> v = {"red",   "blue",   "green", "yellow", "black",  "white",
                                               "brown", "small",  "large", "young",  "old",    "wooden",
                                               "striped", "orange", "grey", "tall",  "little", "big"};
    return v;
}

const std::map<std::string, int>& number_words() {
    static const std::map<std::string, int> m = {{"one", 1}, {"two", 2},   {"three", 3}, {"four", 4},
                                                 {"five", 5}, {"six", 6}, {"several", 3}, {"1", 1},
                                                 {"2", 2},   {"3", 3},   {"4", 4},     {"5", 5}};
    return m;
}

// finding -> diagnosis label
const std::vector<std::pair<std::string, std::string>>& findings() {
    static const std::vector<std::pair<std::string, std::string>> v = {
        {"opacity", "Lung Opacity"},   {"nodule", "Lung Lesion"},       {"effusion", "Pleural Effusion"},
        {"consolidation", "Consolidation"}, {"edema", "Edema"},          {"pneumothorax", "Pneumothorax"},
        {"cardiomegaly", "Cardiomegaly"},   {"atelectasis", "Atelectasis"}, {"fracture", "Fracture"},
        {"pneumonia", "Pneumonia"}};
    return v;
}

const std::vector<std::string>& relations() {
    static const std::vector<std::string> v = {"next to", "holds", "near", "on", "behind", "faces"};
    return v;
}

bool contains(std::string_view hay, std::string_view needle) { return hay.find(needle) != std::string_view::npos; }

std::string singular(const std::string& w) {
    if (w.size() > 3 && w.ends_with("es") && (w.ends_with("ches") || w.ends_with("ses"))) return w.substr(0, w.size() - 2);
    if (w == "men") return "man";
    if (w == "women") return "woman";
    if (w == "children") return "child";
    if (w.size() > 2 && w.back() == 's') return w.substr(0, w.size() - 1);
    return w;
}

bool in(const std::vector<std::string>& v, const std::string& x) { return std::find(v.begin(), v.end(), x) != v.end(); }

std::string join(const std::vector<std::string>& v, std::string_view sep) {
    std::string out;
    for (std::size_t i = 0; i < v.size(); ++i) {
        if (i) out += sep;
        out += v[i];
    }
    return out;
}

std::vector<std::string> split(std::string_view s, std::string_view sep) {
    std::vector<std::string> out;
    std::size_t pos = 0;
    while (true) {
        const std::size_t next = s.find(sep, pos);
        std::string piece(s.substr(pos, next == std::string_view::npos ? std::string_view::npos : next - pos));
        while (!piece.empty() && std::isspace(static_cast<unsigned char>(piece.back()))) piece.pop_back();
        while (!piece.empty() && std::isspace(static_cast<unsigned char>(piece.front()))) piece.erase(piece.begin());
        if (!piece.empty()) out.push_back(piece);
        if (next == std::string_view::npos) break;
        pos = next + sep.size();
    }
    return out;
}

// Integer right after `marker` ("to 5 high-quality" -> 5).
std::optional<int> number_after(std::string_view text, std::string_view marker) {
    auto pos = text.find(marker);
    if (pos == std::string_view::npos) return std::nullopt;
    pos += marker.size();
    while (pos < text.size() && (text[pos] == ' ' || text[pos] == '*')) ++pos;
    int v = 0;
    bool any = false;
    while (pos < text.size() && std::isdigit(static_cast<unsigned char>(text[pos]))) {
        v = v * 10 + (text[pos] - '0');
        any = true;
        ++pos;
    }
    return any ? std::optional<int>(v) : std::nullopt;
}

// Rest of the line starting after `marker`.
std::string line_after(std::string_view text, std::string_view marker) {
    auto pos = text.rfind(marker);
    if (pos == std::string_view::npos) return {};
    pos += marker.size();
    const auto end = text.find('\n', pos);
    return std::string(text.substr(pos, end == std::string_view::npos ? std::string_view::npos : end - pos));
}

bool is_repair(const ChatMessage& m) { return contains(m.joined_text(), "could not be parsed"); }

// Text a model would "see" as the query input of an extraction prompt.
std::string query_input(const ChatMessage& m) {
    const std::string text = m.joined_text();
    static const std::vector<std::string> kRuleTails = {
        "Summarize the style of the", "based on your observations.", "visual features expected in the X-ray."};
    std::size_t start = 0;
    for (const auto& tail : kRuleTails) {
        if (auto p = text.rfind(tail); p != std::string::npos) {
            const auto eol = text.find('\n', p);
            start = std::max(start, eol == std::string::npos ? text.size() : eol);
        }
    }
    std::size_t end = text.rfind("Please process each point step by step.");
    if (end == std::string::npos || end < start) end = text.size();
    std::string out = text.substr(start, end - start);
    // The last image part is the query image; earlier ones are examples.
    for (auto it = m.parts.rbegin(); it != m.parts.rend(); ++it) {
        if (const auto* img = std::get_if<ImagePart>(&*it)) {
            if (auto info = decode_png(img->bytes); info && info->caption) out += " " + *info->caption;
            break;
        }
    }
    return out;
}

struct SceneObject {
    std::string name;
    int count = 1;
    std::string attribute = "plain";
};

std::vector<SceneObject> scan_scene(const std::string& input, std::size_t limit) {
    const auto tokens = content_tokens(input);
    std::vector<SceneObject> out;
    for (std::size_t i = 0; i < tokens.size(); ++i) {
        const std::string noun = in(general_nouns(), tokens[i]) ? tokens[i] : singular(tokens[i]);
        if (!in(general_nouns(), noun)) continue;
        SceneObject obj{noun, 1, "plain"};
        for (std::size_t back = 1; back <= 2 && back <= i; ++back) {
            const auto& prev = tokens[i - back];
            if (auto n = number_words().find(prev); n != number_words().end()) obj.count = n->second;
            else if (in(adjectives(), prev) && obj.attribute == "plain") obj.attribute = prev;
        }
        auto existing = std::find_if(out.begin(), out.end(), [&](const SceneObject& o) { return o.name == noun; });
        if (existing != out.end()) {
            existing->count = std::max(existing->count, obj.count);
            if (existing->attribute == "plain") existing->attribute = obj.attribute;
        } else if (out.size() < limit) {
            out.push_back(obj);
        }
    }
    return out;
}

std::string general_analysis(const std::string& input, std::size_t limit) {
    const auto objs = scan_scene(input, limit);
    std::vector<std::string> names, counts, attrs;
    for (const auto& o : objs) {
        names.push_back(o.name);
        counts.push_back(o.name + ": " + std::to_string(o.count));
        attrs.push_back(o.name + ": " + o.attribute);
    }
    std::ostringstream ss;
    ss << "1. Objects: " << (names.empty() ? "none" : join(names, ", ")) << "\n";
    ss << "2. Counts: " << join(counts, "; ") << "\n";
    ss << "3. Attributes: " << join(attrs, "; ") << "\n";
    ss << "4. Style: everyday scene\n";
    return ss.str();
}

std::string medical_analysis(const std::string& input) {
    const auto tokens = content_tokens(input);
    std::vector<std::string> found;
    for (const auto& t : tokens) {
        const std::string s = singular(t);
        for (const auto& [finding, dx] : findings()) {
            if ((t == finding || s == finding) && !in(found, finding)) found.push_back(finding);
        }
    }
    auto has = [&](const char* w) { return std::find(tokens.begin(), tokens.end(), w) != tokens.end(); };
    const std::string side = has("bilateral") ? "bilateral" : has("left") ? "left" : has("right") ? "right" : "unspecified";
    const std::string location = has("upper") ? "upper" : has("lower") ? "lower" : has("middle") ? "middle" : "unspecified";
    std::ostringstream ss;
    ss << "1. Structures: lungs, heart, trachea\n";
    ss << "2. Abnormalities: " << (found.empty() ? "none" : join(found, ", ")) << "\n";
    ss << "3. Side: " << side << "\n";
    ss << "4. Location: " << location << "\n";
    return ss.str();
}

std::map<std::string, std::string> analysis_fields(const std::string& prose) {
    std::map<std::string, std::string> out;
    std::istringstream in{prose};
    std::string line;
    while (std::getline(in, line)) {
        const auto dot = line.find(". ");
        const auto colon = line.find(':');
        if (dot == std::string::npos || colon == std::string::npos || colon < dot) continue;
        out[line.substr(dot + 2, colon - dot - 2)] = colon + 1 < line.size() ? line.substr(colon + 2) : "";
    }
    return out;
}

std::string integrate_general(const std::string& prose) {
    auto f = analysis_fields(prose);
    json objects = json::array();
    json numbers = json::object();
    json attributes = json::object();
    if (f["Objects"] != "none") {
        for (const auto& o : split(f["Objects"], ",")) objects.push_back(o);
    }
    for (const auto& kv : split(f["Counts"], ";")) {
        auto parts = split(kv, ":");
        if (parts.size() == 2) numbers[parts[0]] = std::stoi(parts[1]);
    }
    for (const auto& kv : split(f["Attributes"], ";")) {
        auto parts = split(kv, ":");
        if (parts.size() == 2) attributes[parts[0]] = parts[1] + " " + parts[0];
    }
    json doc{{"objects", objects}, {"numbers", numbers}, {"attributes", attributes}, {"style", f["Style"]}};
    return "Here is the structured result.\n```json\n" + doc.dump(4) + "\n```\n";
}

std::string integrate_medical(const std::string& prose) {
    auto f = analysis_fields(prose);
    std::vector<std::string> found;
    if (f["Abnormalities"] != "none") found = split(f["Abnormalities"], ",");
    std::vector<std::string> dx;
    for (const auto& x : found) {
        for (const auto& [finding, label] : findings()) {
            if (x == finding && !in(dx, "'" + label + "'")) dx.push_back("'" + label + "'");
        }
    }
    if (dx.empty()) dx.push_back("'No Finding'");
    const bool heart = in(found, "cardiomegaly");
    const bool lungs = !found.empty() && !(found.size() == 1 && heart);
    std::ostringstream ss;
    ss << "# Structured Analysis\n";
    ss << "1. **Anatomical Structures**:\n";
    ss << "   - Lungs: " << (lungs ? "Abnormal" : "Normal") << "\n";
    ss << "   - Heart: " << (heart ? "Abnormal" : "Normal") << "\n";
    ss << "   - Trachea: Normal\n\n";
    ss << "2. **Type of Abnormality**:\n";
    ss << "   - Identified Abnormality: " << (found.empty() ? "None" : join(found, ", ")) << "\n";
    ss << "   - Characteristics: " << (found.empty() ? "None" : "size: small, density: moderate") << "\n\n";
    ss << "3. **Distribution and Location**:\n";
    ss << "   - Side: " << (f["Side"] == "bilateral" ? "Bilateral" : "Unilateral") << "\n";
    ss << "   - Location: " << f["Location"] << "\n";
    ss << "   - Extent: Localized\n\n";
    ss << "4. **Clinical Implication**:\n";
    ss << "   - Possible Diagnosis: [" << join(dx, ", ") << "]\n";
    ss << "   - Recommended Action: " << (found.empty() ? "Routine follow-up" : "Further imaging") << "\n";
    return ss.str();
}

std::string build_kg_response(const std::string& text) {
    std::vector<std::string> objects;
    if (auto doc = extract_json_block(text, JsonKind::Object); doc && doc->contains("objects")) {
        for (const auto& o : doc->at("objects")) {
            if (o.is_string()) objects.push_back(o.get<std::string>());
        }
    }
    std::sort(objects.begin(), objects.end());
    objects.erase(std::unique(objects.begin(), objects.end()), objects.end());
    const int limit = number_after(text, "exactly").value_or(8);
    json arr = json::array();
    auto add = [&](const std::string& h, const std::string& t) {
        if (static_cast<int>(arr.size()) >= limit || h == t) return;
        const auto& rel = relations()[sha256_u64(h + "|" + t) % relations().size()];
        arr.push_back({{"head", h}, {"relation", rel}, {"tail", t}});
    };
    for (std::size_t i = 0; i + 1 < objects.size(); ++i) add(objects[i], objects[i + 1]);
    if (objects.size() >= 3) add(objects.front(), objects.back());
    return "Relationships extracted step by step:\n```json\n" + arr.dump(2) + "\n```";
}

std::string expand_response(const std::string& text, bool medical) {
    const int n = std::max(1, number_after(text, medical ? "generate" : "sentence to").value_or(5));
    const auto entities = split(line_after(text, "Entities:"), ";");
    std::string basic = line_after(text, "**Basic Sentence**:");
    json arr = json::array();
    for (int i = 0; i < n; ++i) {
        if (entities.empty()) {
            arr.push_back(basic.empty() ? std::string("an empty scene") : basic);
            continue;
        }
        const std::size_t k = entities.size();
        const std::string& subject = entities[static_cast<std::size_t>(i) % k];
        std::vector<std::string> others;
        for (std::size_t j = 0; j < k; ++j) {
            if (entities[j] == subject) continue;
            // each view drops one neighbour so the candidates differ
            if (k >= 3 && j == (static_cast<std::size_t>(i) + 1) % k) continue;
            others.push_back(entities[j]);
        }
        std::string d = medical ? "Chest X-ray centred on the " + subject : "A photo of a " + subject;
        if (!others.empty()) d += " with " + join(others, ", ");
        if (!medical && i % 2 == 1) {
            // odd views wander off the graph with one unrelated object
            static const std::vector<std::string> kDistractors = {"bench", "umbrella", "cup", "kite", "clock"};
            const auto& extra = kDistractors[sha256_u64(subject + "#" + std::to_string(i)) % kDistractors.size()];
            if (!in(entities, extra)) d += " and a " + extra;
        }
        d += ".";
        arr.push_back(d);
    }
    return "Sure, here are the descriptions:\n" + arr.dump(2);
}

}  // namespace

ChatResponse MockChatBackend::chat(const ChatRequest& req) {
    validate(req);
    const auto& ms = req.messages;
    std::size_t query = ms.size();
    for (std::size_t i = ms.size(); i-- > 0;) {
        if (ms[i].role == Role::User && !is_repair(ms[i])) {
            query = i;
            break;
        }
    }
    std::string reply = "I am a deterministic mock model.";
    if (query < ms.size()) {
        const ChatMessage& m = ms[query];
        const std::string text = m.joined_text();
        auto previous_assistant = [&]() -> std::string {
            for (std::size_t i = query; i-- > 0;) {
                if (ms[i].role == Role::Assistant) return ms[i].joined_text();
            }
            return {};
        };
        if (contains(text, "integrate the previous result into a structure format")) {
            reply = contains(text, "# Structured Analysis") ? integrate_medical(previous_assistant())
                                                            : integrate_general(previous_assistant());
        } else if (contains(text, "distinct relationships")) {
            reply = build_kg_response(text);
        } else if (contains(text, "high-quality description")) {
            reply = expand_response(text, false);
        } else if (contains(text, "meaningful clinical description")) {
            reply = expand_response(text, true);
        } else if (contains(text, "**Description**:")) {
            reply = line_after(text, "**Description**:");
            while (!reply.empty() && reply.front() == ' ') reply.erase(reply.begin());
        } else if (contains(text, "radiologist") || contains(text, "chest x-ray image and report")) {
            reply = medical_analysis(query_input(m));
        } else if (contains(text, "Identify the top")) {
            const auto limit = static_cast<std::size_t>(number_after(text, "Identify the top").value_or(6));
            reply = general_analysis(query_input(m), limit);
        }
    }
    return ChatResponse{reply, estimate_prompt_tokens(req), static_cast<std::int64_t>((reply.size() + 3) / 4), 1};
}

// ---------------------------------------------------------------------------
// MockEmbeddingBackend

namespace {

std::uint64_t splitmix64(std::uint64_t& state) {
    std::uint64_t z = (state += 0x9e3779b97f4a7c15ULL);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

}  // namespace

EmbeddingVector MockEmbeddingBackend::embed(const Payload& payload, EmbedModel model) {
    if (payload.bytes.empty()) throw Error(Errc::Precondition, "embedding payload is empty");
    ++calls_;
    std::vector<std::string> tokens;
    if (payload.modality == Modality::Text) {
        tokens = content_tokens(payload.bytes);
    } else if (auto info = decode_png(payload.bytes); info && info->caption) {
        tokens = content_tokens(*info->caption);
    }
    if (tokens.empty()) tokens.push_back("#" + sha256_hex(payload.bytes));

    EmbeddingVector out{model, payload.modality, std::vector<double>(dim_, 0.0)};
    const std::string prefix = std::string(embed_model_name(model)) + ":";
    for (const auto& t : tokens) {
        std::uint64_t state = sha256_u64(prefix + t);
        for (auto& v : out.values) {
            // 53-bit mantissa -> [-1, 1)
            v += static_cast<double>(splitmix64(state) >> 11) * 0x1.0p-52 - 1.0;
        }
    }
    normalize_in_place(out.values);
    return out;
}

// ---------------------------------------------------------------------------
// MockImageBackend

MockImageBackend::MockImageBackend() : generators_{"sdxl", "cheff", "mock"} {}

ImageArtifact MockImageBackend::generate_image(const std::string& prompt, const std::string& generator_id,
                                               std::int64_t seed) {
    if (prompt.empty()) throw Error(Errc::Precondition, "image prompt is empty");
    if (!in(generators_, generator_id)) throw Error(Errc::GeneratorUnavailable, generator_id);
    ++calls_;
    const std::uint64_t h = sha256_u64(prompt + '\x1f' + std::to_string(seed) + '\x1f' + generator_id);
    const Rgb colour{static_cast<std::uint8_t>(h >> 56), static_cast<std::uint8_t>(h >> 48),
                     static_cast<std::uint8_t>(h >> 40)};
    // Some seeds render the prompt imperfectly and lose one of its words.
    std::string caption = prompt;
    if ((h >> 8) % 3 == 0) {
        auto words = split(prompt, " ");
        if (words.size() > 3) {
            words.erase(words.begin() + static_cast<std::ptrdiff_t>(3 + (h >> 16) % (words.size() - 3)));
            caption = join(words, " ");
        }
    }
    return ImageArtifact{encode_solid_png(64, 64, colour, caption), ImageFormat::Png, prompt, generator_id, seed};
}

}  // namespace kbc
