// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace adapter_forge {

enum class ErrorCode {
    MalformedConfig,
    UnknownModuleName,
    MissingField,
    InvalidSchema,
    InvalidSignature,
    CorruptHeader,
    UnsupportedDtype,
    ShapeMismatch,
    MissingTensor,
    OrphanTensor,
    DimensionMismatch,
    EmptyInput,
    NonFiniteWeight,
    InvalidWeight,
    SignatureMismatch,
    LayerCountMismatch,
    BaseModelMismatch,
    DuplicateAdapterId,
    MalformedManifest,
    InvalidArgument,
    Io,
};

std::string_view to_string(ErrorCode code);

/// Every library failure is raised as an AdapterError carrying a stable code;
/// the CLI maps codes onto exit statuses.
class AdapterError : public std::runtime_error {
public:
    AdapterError(ErrorCode code, const std::string& message)
        : std::runtime_error(std::string(to_string(code)) + ": " + message), code_(code) {}

    ErrorCode code() const noexcept { return code_; }

private:
    ErrorCode code_;
};

}  // namespace adapter_forge
