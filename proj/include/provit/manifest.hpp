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
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "provit/volume.hpp"

namespace provit {

// A cohort manifest: a JSON array of case records whose file paths are
// relative to the directory holding the manifest.
struct Manifest {
	std::filesystem::path root;
	std::vector<CaseRecord> cases;

	const CaseRecord& find( const std::string& caseId ) const;
};

nlohmann::json to_json( const CaseRecord& record );
CaseRecord case_from_json( const nlohmann::json& j );

Manifest read_manifest( const std::filesystem::path& path );
void write_manifest( const Manifest& manifest, const std::filesystem::path& path );

struct LoadedCase {
	std::vector<Volume> sequences;
	LabelVolume labels;
};

// Reads the requested sequences (in the given order) and the label volume of
// one case. Checks that max_gg agrees with the presence of csPCa voxels.
LoadedCase load_case( const Manifest& manifest, const CaseRecord& record, const std::vector<SequenceTag>& sequences );

// max_gg >= 2 must hold exactly when some voxel carries the csPCa label.
void check_grade_consistency( const CaseRecord& record, const LabelVolume& labels );

} // namespace provit
