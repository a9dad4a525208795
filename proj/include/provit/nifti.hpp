/* Copyright 2026 The provit Authors

Licensed under the Apache License, Version 2.0 (the "License");
you may not use this file except in compliance with the License.
You may obtain a copy of the License at

	http://www.apache.org/licenses/LICENSE-2.0

Unless required by applicable law or agreed to in writing, software
distributed under the License is distributed on an "AS IS" BASIS,
WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
See the License for the specific language governing permissions and
limitations under the License.
==============================================================================*/

#pragma once

#include <filesystem>
#include <variant>

#include "provit/volume.hpp"

namespace provit {

// How integer-typed voxel data is surfaced. Auto returns a LabelVolume only when
// the file is integer-typed and carries the NIfTI label intent code.
enum class NiftiHint { Auto, Intensity, Labels };

using AnyVolume = std::variant<Volume, LabelVolume>;

// Reads a little-endian single-file NIfTI-1 image (.nii or .nii.gz).
// Errors: FormatError on bad header/magic, UnsupportedError on datatype or
// dimensionality outside the supported subset, IoError on unreadable or
// truncated input.
AnyVolume read_nifti( const std::filesystem::path& path, NiftiHint hint = NiftiHint::Auto );
Volume read_volume( const std::filesystem::path& path );
LabelVolume read_labels( const std::filesystem::path& path );

// Volumes are written as float32, label volumes as uint8 with the label intent.
// A ".gz" suffix selects gzip encoding.
void write_nifti( const Volume& volume, const std::filesystem::path& path );
void write_nifti( const LabelVolume& labels, const std::filesystem::path& path );

} // namespace provit
