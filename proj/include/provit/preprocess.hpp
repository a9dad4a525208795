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

#include <cstdint>
#include <span>
#include <vector>

#include "provit/volume.hpp"

namespace provit {

enum class InterpolationMode { Linear, Nearest };

// Target spacing used by the training pipeline: 3.0 mm slices, 0.5 mm in-plane.
inline constexpr Spacing kStandardSpacing{ 3.0, 0.5, 0.5 };
inline constexpr std::size_t kCropSize = 256;

// Output extent per axis is max(1, round(n * d_in / d_out)); the output grid is
// centered on the input grid's physical extent and sampled at voxel centers,
// clamping to the edge voxels.
Volume resample( const Volume& volume, Spacing target, InterpolationMode mode = InterpolationMode::Linear );
// Labels only support nearest-neighbour sampling; passing Linear is an ArgumentError.
LabelVolume resample( const LabelVolume& labels, Spacing target, InterpolationMode mode = InterpolationMode::Nearest );

// Offset of a centered crop window along one axis. Negative values mean the
// input is zero-padded by -offset before the window starts.
std::ptrdiff_t crop_offset( std::size_t input, std::size_t output );

Plane<float> center_crop( const Plane<float>& plane, std::size_t outH = kCropSize, std::size_t outW = kCropSize );
Plane<std::uint8_t> center_crop( const Plane<std::uint8_t>& plane, std::size_t outH = kCropSize, std::size_t outW = kCropSize );
// Crops (or pads) every axial plane of a volume.
Volume center_crop( const Volume& volume, std::size_t outH = kCropSize, std::size_t outW = kCropSize );
LabelVolume center_crop( const LabelVolume& labels, std::size_t outH = kCropSize, std::size_t outW = kCropSize );

struct NormalizationResult {
	Volume volume;
	double mean = 0;
	double stddev = 0;
	// Set when the gland region has zero variance; gland voxels are then zero
	// and the rest of the volume is only mean-shifted.
	bool degenerate = false;
};

// Z-scores the whole volume with statistics taken over mask voxels (non-zero
// entries). Throws ArgumentError for an empty or mis-sized mask.
NormalizationResult normalize_intensity( const Volume& volume, std::span<const std::uint8_t> glandMask );
NormalizationResult normalize_intensity( const Volume& volume, const LabelVolume& labels );

// One three-slice window per axial index with edge replication at the ends.
std::vector<SliceStack> extract_slice_windows( const Volume& volume );
SliceStack slice_window( const Volume& volume, std::size_t center );

// Full chain used before training and inference: resample to the standard
// spacing, crop to 256x256, z-score inside the gland.
struct PreprocessedCase {
	std::vector<Volume> sequences;
	LabelVolume labels;
	std::vector<bool> degenerate;
};

PreprocessedCase preprocess_case( const std::vector<Volume>& sequences, const LabelVolume& labels,
	Spacing target = kStandardSpacing, std::size_t crop = kCropSize );

} // namespace provit
