#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace kbc {

enum class Errc {
    EmptyLabel,
    InconsistentStructured,
    NodeNotInVocab,
    VocabMismatch,
    MissingPlaceholder,
    UnknownTemplate,
    NoStructuredBlock,
    SchemaViolation,
    UnknownDiagnosisLabel,
    InvalidRequest,
    Transport,
    RateLimited,
    ContextOverflow,
    UnsupportedModality,
    GeneratorUnavailable,
    ExtractionFailed,
    ExpansionFailed,
    GenerationFailed,
    EmbeddingUnavailable,
    RankingFailed,
    EtaOutOfRange,
    ShapeMismatch,
    NoPositiveLabels,
    ParseError,
    MissingFile,
    RunExists,
    IoError,
    Precondition,
};

std::string_view errc_name(Errc code) noexcept;

/// Every failure surfaced by the library. `detail()` carries the
/// operation-specific payload (placeholder name, stage, sample id, status).
class Error : public std::runtime_error {
public:
    Error(Errc code, std::string detail);

    Errc code() const noexcept { return code_; }
    const std::string& detail() const noexcept { return detail_; }

    /// HTTP status for Transport/RateLimited, 0 otherwise.
    int status() const noexcept { return status_; }
    Error& with_status(int status) noexcept {
        status_ = status;
        return *this;
    }

private:
    Errc code_;
    std::string detail_;
    int status_ = 0;
};

}  // namespace kbc
