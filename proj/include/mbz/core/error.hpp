#pragma once

#include <stdexcept>
#include <string>

namespace mbz {

enum class ErrorCode {
    MalformedTrace,
    BadMagic,
    UnsupportedLinkType,
    TruncatedCapture,
    Io,
    OverlappingScripts,
    ParseError,
    MissingFile,
    DuplicatePluginId,
    InvalidConfig,
    BadReport,
    InsufficientSamples,
};

inline const char* to_string(ErrorCode c) {
    switch (c) {
        case ErrorCode::MalformedTrace: return "MalformedTrace";
        case ErrorCode::BadMagic: return "BadMagic";
        case ErrorCode::UnsupportedLinkType: return "UnsupportedLinkType";
        case ErrorCode::TruncatedCapture: return "TruncatedCapture";
        case ErrorCode::Io: return "Io";
        case ErrorCode::OverlappingScripts: return "OverlappingScripts";
        case ErrorCode::ParseError: return "ParseError";
        case ErrorCode::MissingFile: return "MissingFile";
        case ErrorCode::DuplicatePluginId: return "DuplicatePluginId";
        case ErrorCode::InvalidConfig: return "InvalidConfig";
        case ErrorCode::BadReport: return "BadReport";
        case ErrorCode::InsufficientSamples: return "InsufficientSamples";
    }
    return "Unknown";
}

class Error : public std::runtime_error {
public:
    Error(ErrorCode code, const std::string& what)
        : std::runtime_error(std::string(to_string(code)) + ": " + what), code_(code) {}

    ErrorCode code() const noexcept { return code_; }

private:
    ErrorCode code_;
};

}  // namespace mbz
