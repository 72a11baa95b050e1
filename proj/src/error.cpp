#include "kbc/error.hpp"

namespace kbc {

std::string_view errc_name(Errc code) noexcept {
    switch (code) {
    case Errc::EmptyLabel: return "EmptyLabel";
    case Errc::InconsistentStructured: return "InconsistentStructured";
    case Errc::NodeNotInVocab: return "NodeNotInVocab";
    case Errc::VocabMismatch: return "VocabMismatch";
    case Errc::MissingPlaceholder: return "MissingPlaceholder";
    case Errc::UnknownTemplate: return "UnknownTemplate";
    case Errc::NoStructuredBlock: return "NoStructuredBlock";
    case Errc::SchemaViolation: return "SchemaViolation";
    case Errc::UnknownDiagnosisLabel: return "UnknownDiagnosisLabel";
    case Errc::InvalidRequest: return "InvalidRequest";
    case Errc::Transport: return "Transport";
    case Errc::RateLimited: return "RateLimited";
    case Errc::ContextOverflow: return "ContextOverflow";
    case Errc::UnsupportedModality: return "UnsupportedModality";
    case Errc::GeneratorUnavailable: return "GeneratorUnavailable";
    case Errc::ExtractionFailed: return "ExtractionFailed";
    case Errc::ExpansionFailed: return "ExpansionFailed";
    case Errc::GenerationFailed: return "GenerationFailed";
    case Errc::EmbeddingUnavailable: return "EmbeddingUnavailable";
    case Errc::RankingFailed: return "RankingFailed";
    case Errc::EtaOutOfRange: return "EtaOutOfRange";
    case Errc::ShapeMismatch: return "ShapeMismatch";
    case Errc::NoPositiveLabels: return "NoPositiveLabels";
    case Errc::ParseError: return "ParseError";
    case Errc::MissingFile: return "MissingFile";
    case Errc::RunExists: return "RunExists";
    case Errc::IoError: return "IoError";
    case Errc::Precondition: return "Precondition";
    }
    return "Unknown";
}

Error::Error(Errc code, std::string detail)
    : std::runtime_error(std::string(errc_name(code)) + (detail.empty() ? "" : ": " + detail)),
      code_(code),
      detail_(std::move(detail)) {}

}  // namespace kbc
