#include "kbc/prompting.hpp"

#include <algorithm>
#include <cctype>
#include <fstream>
#include <set>
#include <sstream>

#include "kbc/error.hpp"

#ifndef KBC_DEFAULT_TEMPLATE_DIR
#define KBC_DEFAULT_TEMPLATE_DIR "prompts/v1"
#endif

namespace kbc {

using nlohmann::json;

std::string_view role_name(Role r) noexcept {
    switch (r) {
    case Role::System: return "system";
    case Role::User: return "user";
    case Role::Assistant: return "assistant";
    }
    return "user";
}

ChatMessage ChatMessage::text(Role role, std::string content) {
    return ChatMessage{role, {TextPart{std::move(content)}}};
}

std::string ChatMessage::joined_text() const {
    std::string out;
    for (const auto& p : parts) {
        if (const auto* t = std::get_if<TextPart>(&p)) out += t->text;
    }
    return out;
}

std::size_t ChatMessage::image_count() const {
    return static_cast<std::size_t>(
        std::count_if(parts.begin(), parts.end(), [](const ContentPart& p) { return std::holds_alternative<ImagePart>(p); }));
}

void validate(const ChatMessage& m) {
    if (m.parts.empty()) throw Error(Errc::InvalidRequest, "message has no content parts");
    if (m.role != Role::User && m.image_count() > 0)
        throw Error(Errc::InvalidRequest, "image parts are only allowed in user messages");
}

json to_digest_json(const ChatMessage& m) {
    json parts = json::array();
    for (const auto& p : m.parts) {
        if (const auto* t = std::get_if<TextPart>(&p)) {
            parts.push_back({{"type", "text"}, {"text", t->text}});
        } else {
            const auto& img = std::get<ImagePart>(p);
            parts.push_back({{"type", "image"}, {"format", image_format_name(img.format)}, {"sha256", sha256_hex(img.bytes)}});
        }
    }
    return json{{"role", role_name(m.role)}, {"content", parts}};
}

json to_digest_json(const std::vector<ChatMessage>& ms) {
    json arr = json::array();
    for (const auto& m : ms) arr.push_back(to_digest_json(m));
    return arr;
}

// ---------------------------------------------------------------------------
// Templates

namespace {

bool is_name_char(char c) { return (c >= 'a' && c <= 'z') || (c >= '0' && c <= '9') || c == '-'; }

// Matches `[name]` at text[pos]; returns the name length or 0.
std::size_t match_placeholder(std::string_view text, std::size_t pos) {
    if (text[pos] != '[' || pos + 2 >= text.size()) return 0;
    if (!(text[pos + 1] >= 'a' && text[pos + 1] <= 'z')) return 0;
    std::size_t end = pos + 1;
    while (end < text.size() && is_name_char(text[end])) ++end;
    if (end >= text.size() || text[end] != ']' || text[end - 1] == '-') return 0;
    return end - pos - 1;
}

std::string read_file(const std::filesystem::path& p) {
    std::ifstream in(p, std::ios::binary);
    if (!in) throw Error(Errc::IoError, "cannot read " + p.string());
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

std::string trim_newlines(std::string s) {
    while (!s.empty() && (s.back() == '\n' || s.back() == '\r')) s.pop_back();
    std::size_t start = 0;
    while (start < s.size() && (s[start] == '\n' || s[start] == '\r')) ++start;
    return s.substr(start);
}

std::string trim(std::string_view s) {
    std::size_t b = 0, e = s.size();
    while (b < e && std::isspace(static_cast<unsigned char>(s[b]))) ++b;
    while (e > b && std::isspace(static_cast<unsigned char>(s[e - 1]))) --e;
    return std::string(s.substr(b, e - b));
}

}  // namespace

std::vector<std::string> placeholder_names(std::string_view text) {
    std::vector<std::string> out;
    for (std::size_t i = 0; i < text.size(); ++i) {
        if (std::size_t len = match_placeholder(text, i)) {
            out.emplace_back(text.substr(i + 1, len));
            i += len + 1;
        }
    }
    return out;
}

std::string substitute(std::string_view text, const PlaceholderMap& values) {
    std::string out;
    out.reserve(text.size());
    for (std::size_t i = 0; i < text.size(); ++i) {
        if (std::size_t len = match_placeholder(text, i)) {
            auto name = text.substr(i + 1, len);
            auto it = values.find(name);
            if (it == values.end()) throw Error(Errc::MissingPlaceholder, std::string(name));
            out += it->second;
            i += len + 1;
        } else {
            out.push_back(text[i]);
        }
    }
    return out;
}

PromptTemplate parse_template(std::string id, std::string_view source) {
    PromptTemplate t;
    t.id = std::move(id);
    std::optional<Role> role;
    std::string body;
    auto flush = [&] {
        if (role) t.messages.emplace_back(*role, trim_newlines(std::move(body)));
        body.clear();
    };
    std::istringstream in{std::string(source)};
    std::string line;
    while (std::getline(in, line)) {
        if (!line.empty() && line.back() == '\r') line.pop_back();
        std::optional<Role> next;
        if (line == "<|system|>") next = Role::System;
        else if (line == "<|user|>") next = Role::User;
        else if (line == "<|assistant|>") next = Role::Assistant;
        if (next) {
            flush();
            role = next;
            continue;
        }
        if (!role) {
            if (trim(line).empty()) continue;
            throw Error(Errc::ParseError, "template " + t.id + ": text before the first role marker");
        }
        body += line;
        body += '\n';
    }
    flush();
    if (t.messages.empty()) throw Error(Errc::ParseError, "template " + t.id + " defines no messages");
    std::set<std::string> names;
    for (const auto& [r, text] : t.messages) {
        for (auto& n : placeholder_names(text)) names.insert(std::move(n));
    }
    t.placeholders.assign(names.begin(), names.end());
    return t;
}

TemplateLibrary TemplateLibrary::load(const std::filesystem::path& dir) {
    namespace fs = std::filesystem;
    if (!fs::is_directory(dir)) throw Error(Errc::IoError, "template directory not found: " + dir.string());
    TemplateLibrary lib;
    for (const auto& entry : fs::directory_iterator(dir)) {
        if (!entry.is_regular_file() || entry.path().extension() != ".txt") continue;
        const std::string id = entry.path().stem().string();
        lib.templates_.emplace(id, parse_template(id, read_file(entry.path())));
    }
    if (fs::is_directory(dir / "fragments")) {
        for (const auto& entry : fs::directory_iterator(dir / "fragments")) {
            if (!entry.is_regular_file() || entry.path().extension() != ".txt") continue;
            lib.fragments_.emplace(entry.path().stem().string(), trim_newlines(read_file(entry.path())));
        }
    }
    return lib;
}

std::filesystem::path TemplateLibrary::default_dir() { return KBC_DEFAULT_TEMPLATE_DIR; }

const PromptTemplate& TemplateLibrary::get(std::string_view id) const {
    auto it = templates_.find(id);
    if (it == templates_.end()) throw Error(Errc::UnknownTemplate, std::string(id));
    return it->second;
}

const std::string& TemplateLibrary::fragment(std::string_view name) const {
    auto it = fragments_.find(name);
    if (it == fragments_.end()) throw Error(Errc::UnknownTemplate, "fragment " + std::string(name));
    return it->second;
}

std::vector<std::string> TemplateLibrary::ids() const {
    std::vector<std::string> out;
    for (const auto& [id, t] : templates_) out.push_back(id);
    return out;
}

std::vector<ChatMessage> TemplateLibrary::render(std::string_view id, const PlaceholderMap& values,
                                                 const AttachmentMap& attachments) const {
    const PromptTemplate& t = get(id);
    for (const auto& name : t.placeholders) {
        if (name == kUserInputSlot) continue;
        if (!values.contains(name) && !attachments.contains(name)) throw Error(Errc::MissingPlaceholder, name);
    }

    std::vector<ChatMessage> out;
    for (const auto& [role, text] : t.messages) {
        ChatMessage msg{role, {}};
        std::string pending;
        auto flush_text = [&] {
            if (!pending.empty()) msg.parts.emplace_back(TextPart{std::move(pending)});
            pending.clear();
        };
        for (std::size_t i = 0; i < text.size(); ++i) {
            const std::size_t len = match_placeholder(text, i);
            if (len == 0) {
                pending.push_back(text[i]);
                continue;
            }
            const std::string_view name = std::string_view(text).substr(i + 1, len);
            i += len + 1;
            if (auto a = attachments.find(name); a != attachments.end()) {
                if (role != Role::User)
                    throw Error(Errc::InvalidRequest, "attachment '" + std::string(name) + "' lands in a non-user message");
                flush_text();
                msg.parts.emplace_back(a->second);
            }
            if (auto v = values.find(name); v != values.end()) pending += v->second;
        }
        flush_text();
        if (msg.parts.empty()) msg.parts.emplace_back(TextPart{});
        out.push_back(std::move(msg));
    }
    return out;
}

// ---------------------------------------------------------------------------
// Parsing

namespace {

// Index one past the bracket matching text[open], or npos.
std::size_t match_close(std::string_view text, std::size_t open) {
    std::vector<char> stack;
    bool in_string = false;
    bool escaped = false;
    for (std::size_t i = open; i < text.size(); ++i) {
        const char c = text[i];
        if (in_string) {
            if (escaped) escaped = false;
            else if (c == '\\') escaped = true;
            else if (c == '"') in_string = false;
            continue;
        }
        switch (c) {
        case '"': in_string = true; break;
        case '{': stack.push_back('}'); break;
        case '[': stack.push_back(']'); break;
        case '}':
        case ']':
            if (stack.empty() || stack.back() != c) return std::string_view::npos;
            stack.pop_back();
            if (stack.empty()) return i + 1;
            break;
        default: break;
        }
    }
    return std::string_view::npos;
}

}  // namespace

std::optional<json> extract_json_block(std::string_view text, JsonKind kind) {
    for (std::size_t i = 0; i < text.size(); ++i) {
        const char c = text[i];
        if (c != '{' && c != '[') continue;
        if (kind == JsonKind::Object && c != '{') continue;
        if (kind == JsonKind::Array && c != '[') continue;
        const std::size_t end = match_close(text, i);
        if (end == std::string_view::npos) continue;
        json doc = json::parse(text.substr(i, end - i), nullptr, /*allow_exceptions=*/false);
        if (doc.is_discarded()) continue;
        return doc;
    }
    return std::nullopt;
}

std::string strip_code_fences(std::string_view text) {
    std::string out;
    std::istringstream in{std::string(text)};
    std::string line;
    while (std::getline(in, line)) {
        if (trim(line).rfind("```", 0) == 0) continue;
        out += line;
        out += '\n';
    }
    return out;
}

const std::vector<std::string>& diagnosis_labels() {
    static const std::vector<std::string> labels = {
        "No Finding",   "Enlarged Cardiomediastinum", "Cardiomegaly", "Lung Opacity", "Lung Lesion",
        "Edema",        "Consolidation",              "Pneumonia",    "Atelectasis",  "Pneumothorax",
        "Pleural Effusion", "Pleural Other",          "Fracture",     "Support Devices",
    };
    return labels;
}

StructuredKnowledge parse_structured_extraction(std::string_view response, Domain domain) {
    if (domain == Domain::Medical) return parse_medical_report(response);
    auto doc = extract_json_block(response, JsonKind::Object);
    if (!doc) throw Error(Errc::NoStructuredBlock, "no JSON object in response");
    return structured_from_json(*doc, Domain::General);
}

namespace {

struct Bullet {
    std::string key;
    std::string value;
};

struct Section {
    std::string title;  // lower-cased
    std::vector<Bullet> bullets;
};

std::string lower(std::string s) {
    for (auto& c : s) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
    return s;
}

// "1. **Anatomical Structures**:" -> "anatomical structures"
std::optional<std::string> section_title(std::string_view line) {
    std::string t = trim(line);
    std::size_t i = 0;
    while (i < t.size() && std::isdigit(static_cast<unsigned char>(t[i]))) ++i;
    if (i == 0 || i >= t.size() || t[i] != '.') return std::nullopt;
    std::string rest = trim(std::string_view(t).substr(i + 1));
    if (rest.rfind("**", 0) != 0) return std::nullopt;
    const std::size_t close = rest.find("**", 2);
    if (close == std::string::npos) return std::nullopt;
    return lower(trim(std::string_view(rest).substr(2, close - 2)));
}

std::string unbracket(std::string s) {
    s = trim(s);
    if (s.size() >= 2 && s.front() == '[' && s.back() == ']') s = trim(std::string_view(s).substr(1, s.size() - 2));
    return s;
}

std::vector<std::string> split_list(std::string_view s) {
    std::vector<std::string> out;
    std::string cur;
    for (char c : s) {
        if (c == ',') {
            out.push_back(trim(cur));
            cur.clear();
        } else {
            cur.push_back(c);
        }
    }
    out.push_back(trim(cur));
    std::erase_if(out, [](const std::string& x) { return x.empty(); });
    return out;
}

std::string strip_quotes(std::string s) {
    s = trim(s);
    while (!s.empty() && (s.front() == '\'' || s.front() == '"')) s.erase(s.begin());
    while (!s.empty() && (s.back() == '\'' || s.back() == '"')) s.pop_back();
    return trim(s);
}

bool is_none(const std::string& v) {
    const std::string l = lower(unbracket(v));
    return l.empty() || l == "none" || l == "n/a" || l == "no abnormality" || l == "not applicable";
}

const Section* find_section(const std::vector<Section>& sections, std::string_view title) {
    for (const auto& s : sections) {
        if (s.title == title) return &s;
    }
    return nullptr;
}

const Bullet* find_bullet(const Section& s, std::string_view key) {
    for (const auto& b : s.bullets) {
        if (lower(b.key) == key) return &b;
    }
    return nullptr;
}

}  // namespace

StructuredKnowledge parse_medical_report(std::string_view response) {
    std::vector<Section> sections;
    std::istringstream in{strip_code_fences(response)};
    std::string line;
    bool after_blank = false;
    while (std::getline(in, line)) {
        if (auto title = section_title(line)) {
            sections.push_back(Section{*title, {}});
            after_blank = false;
            continue;
        }
        if (sections.empty()) continue;
        const std::string t = trim(line);
        if (t.empty()) {
            after_blank = true;
            continue;
        }
        const bool joins = !after_blank;
        after_blank = false;
        if (t.front() == '-' || t.front() == '*') {
            std::string body = trim(std::string_view(t).substr(1));
            const std::size_t colon = body.find(':');
            if (colon == std::string::npos) {
                sections.back().bullets.push_back(Bullet{trim(body), ""});
            } else {
                std::string key = trim(std::string_view(body).substr(0, colon));
                std::erase(key, '*');
                sections.back().bullets.push_back(
                    Bullet{trim(key), trim(std::string_view(body).substr(colon + 1))});
            }
        } else if (joins && !sections.back().bullets.empty()) {
            // continuation of a wrapped bullet value
            auto& v = sections.back().bullets.back().value;
            v += v.empty() ? t : " " + t;
        }
    }
    if (sections.empty()) throw Error(Errc::NoStructuredBlock, "no numbered **section** headers found");

    const Section* anatomy = find_section(sections, "anatomical structures");
    const Section* abnormality = find_section(sections, "type of abnormality");
    const Section* distribution = find_section(sections, "distribution and location");
    const Section* implication = find_section(sections, "clinical implication");
    if (!anatomy || !abnormality || !distribution || !implication)
        throw Error(Errc::SchemaViolation, "medical report must contain all four analysis sections");

    StructuredKnowledge sk;
    sk.domain = Domain::Medical;
    auto add_object = [&](const std::string& raw, std::string attr) {
        std::string label;
        try {
            label = normalize_label(raw);
        } catch (const Error&) {
            throw Error(Errc::SchemaViolation, "empty structure name");
        }
        if (std::find(sk.objects.begin(), sk.objects.end(), label) == sk.objects.end()) sk.objects.push_back(label);
        if (!attr.empty()) {
            auto& slot = sk.attributes[label];
            slot += slot.empty() ? attr : "; " + attr;
        }
    };

    for (const auto& b : anatomy->bullets) add_object(b.key, b.value);

    if (const Bullet* found = find_bullet(*abnormality, "identified abnormality"); found && !is_none(found->value)) {
        std::vector<std::string> details;
        if (const Bullet* ch = find_bullet(*abnormality, "characteristics"); ch && !ch->value.empty())
            details.push_back(unbracket(ch->value));
        for (const auto& b : distribution->bullets) {
            if (!b.value.empty()) details.push_back(lower(b.key) + ": " + unbracket(b.value));
        }
        std::string attr;
        for (const auto& d : details) attr += attr.empty() ? d : "; " + d;
        for (const auto& name : split_list(unbracket(found->value))) add_object(name, attr);
    }

    std::vector<std::string> diagnoses;
    if (const Bullet* dx = find_bullet(*implication, "possible diagnosis")) {
        for (const auto& item : split_list(unbracket(dx->value))) {
            const std::string label = strip_quotes(item);
            if (label.empty()) continue;
            auto it = std::find_if(diagnosis_labels().begin(), diagnosis_labels().end(),
                                   [&](const std::string& known) { return lower(known) == lower(label); });
            if (it == diagnosis_labels().end()) throw Error(Errc::UnknownDiagnosisLabel, label);
            diagnoses.push_back(*it);
        }
    }
    std::string style;
    if (!diagnoses.empty()) {
        style = "Possible Diagnosis: ";
        for (std::size_t i = 0; i < diagnoses.size(); ++i) style += (i ? ", " : "") + diagnoses[i];
    }
    if (const Bullet* action = find_bullet(*implication, "recommended action"); action && !action->value.empty()) {
        style += (style.empty() ? "" : "; ") + std::string("Recommended Action: ") + unbracket(action->value);
    }
    sk.style = style;
    if (sk.objects.empty()) throw Error(Errc::SchemaViolation, "no anatomical structures listed");
    return sk;
}

std::vector<Triplet> parse_triplets(std::string_view response) {
    auto doc = extract_json_block(response, JsonKind::Array);
    if (!doc) throw Error(Errc::NoStructuredBlock, "no JSON array in response");
    return triplets_from_json(*doc);
}

DescriptionList parse_description_list(std::string_view response, std::size_t expected_n) {
    if (expected_n == 0) throw Error(Errc::Precondition, "expected description count must be >= 1");
    auto doc = extract_json_block(response, JsonKind::Array);
    if (!doc) throw Error(Errc::NoStructuredBlock, "no JSON array in response");
    DescriptionList out;
    for (const auto& item : *doc) {
        if (!item.is_string()) throw Error(Errc::SchemaViolation, "descriptions must be strings");
        std::string d = trim(item.get<std::string>());
        if (!d.empty()) out.descriptions.push_back(std::move(d));
    }
    if (out.descriptions.empty()) throw Error(Errc::SchemaViolation, "description list is empty");
    if (out.descriptions.size() > expected_n) out.descriptions.resize(expected_n);
    out.short_list = out.descriptions.size() < expected_n;
    return out;
}

}  // namespace kbc
