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

#include <array>
#include <cstdint>
#include <filesystem>
#include <map>
#include <vector>

#include "provit/manifest.hpp"
#include "provit/volume.hpp"

namespace provit {

// Axis-aligned ellipsoid. Center in voxel coordinates (z, y, x), semi-axes in mm.
struct Ellipsoid {
	std::array<double, 3> center{};
	std::array<double, 3> semi_axes_mm{};

	// Normalized radius of a voxel center; <= 1 means inside.
	double radius( double z, double y, double x, Spacing sp ) const;
	double volume_mm3() const;
};

struct PhantomLesion {
	Ellipsoid shape;
	bool cspca = true;
	int gg = 2; // 1 for indolent, 2..5 for csPCa
};

struct SequenceContrast {
	double background_mean = 0.1;
	double gland_mean = 1.0;
	double indolent_mean = 0.8;
	double cspca_mean = 0.5;
	double noise_sigma = 0.08;
};

struct PhantomSpec {
	std::uint64_t seed = 0;
	Shape3 shape{ 16, 224, 224 };
	Spacing spacing{ 3.0, 0.6, 0.6 };
	Ellipsoid gland;
	std::vector<PhantomLesion> lesions;
	std::map<SequenceTag, SequenceContrast> contrast = default_contrast();
	double smoothing_fwhm_mm = 1.5;
	double psa_base = 3.0;
	double psa_per_ml = 1.5;
	double psa_noise = 1.0;

	static std::map<SequenceTag, SequenceContrast> default_contrast();
	// Throws ArgumentError when a lesion leaves the gland or a parameter is invalid.
	void validate() const;
};

struct PhantomCase {
	std::map<SequenceTag, Volume> volumes;
	LabelVolume labels;
	CaseRecord record;
	double lesion_volume_ml = 0;
};

PhantomCase generate_case( const PhantomSpec& spec, const std::string& caseId = "phantom" );

// PSA model: base + perMl * lesionMl + noise * standardNormal, floored at 0.1.
double phantom_psa( double base, double perMl, double lesionMl, double noise, double standardNormal );

struct CohortProfile {
	double cspca_fraction = 0.4;
	double indolent_fraction = 0.2;
	double negative_fraction = 0.4;
	// Multiplies every lesion-vs-gland contrast; 1 is the default detectability.
	double contrast_scale = 1.0;
	double noise_sigma = 0.08;
	Shape3 shape{ 16, 224, 224 };
	Spacing spacing{ 3.0, 0.6, 0.6 };
};

enum class CaseKind { CsPCa, Indolent, Negative };

// Largest-remainder split of n cases into the profile's three kinds.
std::array<std::size_t, 3> cohort_counts( std::size_t n, const CohortProfile& profile );

// Random spec of the requested kind drawn from the given seed.
PhantomSpec random_phantom_spec( std::uint64_t seed, CaseKind kind, const CohortProfile& profile );

struct Cohort {
	std::vector<PhantomSpec> specs;
	std::vector<CaseKind> kinds;
	std::vector<std::string> case_ids;
};

// Per-case seeds are derived from the master seed; case kinds are shuffled.
Cohort plan_cohort( std::size_t n, std::uint64_t seed, const CohortProfile& profile );

// Generates every case of the plan and writes NIfTI files plus manifest.json
// under outDir. Returns the written manifest.
Manifest write_cohort( const Cohort& cohort, const std::filesystem::path& outDir );

std::uint64_t derive_seed( std::uint64_t master, std::uint64_t index );

} // namespace provit
