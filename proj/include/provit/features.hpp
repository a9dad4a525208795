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
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "provit/model.hpp"
#include "provit/volume.hpp"

namespace provit {

struct PcaResult {
	Eigen::RowVectorXd mean;
	// Top components as rows, unit length, sign fixed so the largest-magnitude entry is positive.
	Eigen::MatrixXd components;
	// Eigenvalues of the covariance in descending order (all of them).
	Eigen::VectorXd eigenvalues;
};

// Exact eigendecomposition of the sample covariance of the rows of features.
PcaResult pca_top_components( const Eigen::MatrixXd& features, int k = 3 );

struct FeatureSlice {
	SequenceTag sequence = SequenceTag::T2;
	std::size_t slice = 0;
	// Component maps on the full input plane; zero outside the decoded interior.
	std::array<Plane<float>, 3> components;
};

struct FeatureExport {
	std::vector<SequenceTag> sequences;
	std::vector<PcaResult> pca;
	std::vector<FeatureSlice> maps;
	// Raw encoder features of gland patches, one block per sequence.
	std::vector<Eigen::MatrixXd> features;
	// (slice, patch row, patch col) of every feature row; shared by all sequences.
	std::vector<std::array<int, 3>> patches;
};

// Encoder features of patches lying fully inside the gland on the given slices
// (all gland slices when empty) projected onto their top three principal components.
FeatureExport feature_pca_maps( Model<float>& model, const std::vector<Volume>& sequences, const LabelVolume& labels,
	std::vector<std::size_t> slices = {} );
void write_feature_csv( const FeatureExport& features, const std::string& caseId, const std::string& path );

} // namespace provit
