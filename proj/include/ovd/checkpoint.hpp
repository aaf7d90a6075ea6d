// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <filesystem>
#include <span>

#include <json.hpp>

#include "ovd/tensor.hpp"

namespace ovd {

struct Checkpoint {
    ParameterSet tensors;
    nlohmann::json meta = nlohmann::json::object();
};

/// Writes `<stem>.json` (manifest: names, shapes, byte offsets) and the raw
/// buffer `<stem>.bin` of little-endian float64 values. `manifest` is the
/// .json path; the buffer path is derived by replacing the extension.
void save_checkpoint(const std::filesystem::path& manifest, std::span<const NamedTensor> tensors,
                     const nlohmann::json& meta = nlohmann::json::object());

Checkpoint load_checkpoint(const std::filesystem::path& manifest);

/// Copies values from `source` into same-named, same-shaped tensors of `target`.
/// Every target tensor must be present in the source.
void assign_parameters(ParameterSet& target, std::span<const NamedTensor> source);

/// FNV-1a over names, shapes and raw value bytes.
std::uint64_t parameter_checksum(std::span<const NamedTensor> tensors);

}  // namespace ovd
