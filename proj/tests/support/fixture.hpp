#pragma once

#include <filesystem>

#include "kbc/store.hpp"

namespace kbc::testing {

/// Eight general-domain samples over six labels. Every image is a small PNG
/// whose caption chunk describes the scene, which is what the mock models
/// read as image content.
Manifest fixture_manifest();

/// Writes the fixture manifest and its images under `dir`; returns the
/// manifest path.
std::filesystem::path write_fixture(const std::filesystem::path& dir);

/// Fresh, empty scratch directory under the system temp directory.
std::filesystem::path scratch_dir(const std::string& tag);

}  // namespace kbc::testing
