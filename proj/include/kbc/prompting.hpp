#pragma once

#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

#include "json.hpp"
#include "kbc/kgraph.hpp"
#include "kbc/media.hpp"

namespace kbc {

enum class Role { System, User, Assistant };

std::string_view role_name(Role r) noexcept;

struct TextPart {
    std::string text;
    bool operator==(const TextPart&) const = default;
};

struct ImagePart {
    std::string bytes;
    ImageFormat format = ImageFormat::Png;
    bool operator==(const ImagePart&) const = default;
};

using ContentPart = std::variant<TextPart, ImagePart>;

struct ChatMessage {
    Role role = Role::User;
    std::vector<ContentPart> parts;

    static ChatMessage text(Role role, std::string content);
    /// Concatenation of the text parts.
    std::string joined_text() const;
    std::size_t image_count() const;

    bool operator==(const ChatMessage&) const = default;
};

/// Throws InvalidRequest unless the message has at least one part and
/// images appear only in user messages.
void validate(const ChatMessage& m);

/// Digest form used in transcripts and cache keys: images appear as their
/// format and sha256 instead of raw bytes.
nlohmann::json to_digest_json(const ChatMessage& m);
nlohmann::json to_digest_json(const std::vector<ChatMessage>& ms);

namespace templates {
inline constexpr std::string_view kExtractionGeneral = "extraction_general";
inline constexpr std::string_view kExtractionMedicalXray = "extraction_medical_xray";
inline constexpr std::string_view kExtractionMedicalReport = "extraction_medical_report";
inline constexpr std::string_view kIntegrateCot = "integrate_cot";
inline constexpr std::string_view kBuildKg = "build_kg";
inline constexpr std::string_view kExpandGeneral = "expand_descriptions_general";
inline constexpr std::string_view kExpandMedical = "expand_descriptions_medical";
inline constexpr std::string_view kRefineText = "refine_text";

inline constexpr std::string_view kReturnFormatGeneral = "return_format_general";
inline constexpr std::string_view kReturnFormatMedical = "return_format_medical";
inline constexpr std::string_view kRepair = "repair";
}  // namespace templates

/// The input slot. Optional: rendering leaves it empty when neither a text
/// value nor an attachment is supplied for it.
inline constexpr std::string_view kUserInputSlot = "user-input";

using PlaceholderMap = std::map<std::string, std::string, std::less<>>;
using AttachmentMap = std::map<std::string, ImagePart, std::less<>>;

struct PromptTemplate {
    std::string id;
    std::vector<std::pair<Role, std::string>> messages;
    std::vector<std::string> placeholders;  // sorted, unique
};

/// Parses the on-disk template format: blocks introduced by `<|system|>`,
/// `<|user|>` or `<|assistant|>` lines; placeholders are `[lower-kebab]`.
PromptTemplate parse_template(std::string id, std::string_view source);

/// Names of every `[placeholder]` token in `text`, in order of appearance.
std::vector<std::string> placeholder_names(std::string_view text);

/// Single-pass substitution of text-only placeholders (used for fragments).
std::string substitute(std::string_view text, const PlaceholderMap& values);

class TemplateLibrary {
public:
    /// Loads every `<id>.txt` under `dir` and every fragment under
    /// `dir/fragments`.
    static TemplateLibrary load(const std::filesystem::path& dir);
    /// Directory shipped with the sources.
    static std::filesystem::path default_dir();

    const PromptTemplate& get(std::string_view id) const;
    const std::string& fragment(std::string_view name) const;
    std::vector<std::string> ids() const;

    /// Fills placeholders byte-exactly. Names present in `attachments` become
    /// image parts at the placeholder position. Throws MissingPlaceholder,
    /// UnknownTemplate.
    std::vector<ChatMessage> render(std::string_view id, const PlaceholderMap& values,
                                    const AttachmentMap& attachments = {}) const;

private:
    std::map<std::string, PromptTemplate, std::less<>> templates_;
    std::map<std::string, std::string, std::less<>> fragments_;
};

// ---------------------------------------------------------------------------
// Response parsing

enum class JsonKind { Object, Array, Any };

/// Finds the first `{` or `[` whose balanced span parses as a JSON document
/// of the requested kind. String literals and escapes are respected.
std::optional<nlohmann::json> extract_json_block(std::string_view text, JsonKind kind);

/// Drops lines that open or close a ``` fence.
std::string strip_code_fences(std::string_view text);

/// The 14 diagnosis labels allowed in the medical return format.
const std::vector<std::string>& diagnosis_labels();

StructuredKnowledge parse_structured_extraction(std::string_view response, Domain domain);

/// Sectioned medical report (four `N. **Title**:` sections with `- Key: value`
/// bullets).
StructuredKnowledge parse_medical_report(std::string_view response);

std::vector<Triplet> parse_triplets(std::string_view response);

struct DescriptionList {
    std::vector<std::string> descriptions;
    /// Fewer entries than requested were returned.
    bool short_list = false;
};

DescriptionList parse_description_list(std::string_view response, std::size_t expected_n);

}  // namespace kbc
