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
#include <vector>

#include <nlohmann/json.hpp>

#include "provit/autograd.hpp"
#include "provit/params.hpp"
#include "provit/volume.hpp"

namespace provit {

enum class PatchClass : std::uint8_t { Cancer, NormalGland, Excluded };

// Which labels count as cancer when measuring patch cancer fractions.
enum class CancerDefinition { CsPCaOnly, AllCancer };

struct ContrastiveConfig {
	double tau = 0.95;
	double margin = 0.5;
	double alpha = 0.1;
	// Minimum Chebyshev patch distance between a negative target and any patch with cancer pixels.
	int exclusion_radius = 2;
	// Maximum negatives per positive after under-sampling.
	double balance = 1.0;
	CancerDefinition cancer = CancerDefinition::CsPCaOnly;
	// Also form positive pairs between adjacent normal-gland patches.
	bool normal_positives = true;

	void validate() const;
};

// Per-patch label fractions over the patch-aligned interior of one plane.
struct PatchGrid {
	int rows = 0;
	int cols = 0;
	int patch = 14;
	std::vector<double> rho_c;
	std::vector<double> rho_g; // gland pixels that are not cancer
	std::vector<PatchClass> cls;

	int index( int r, int c ) const { return r * cols + c; }
	std::size_t size() const { return cls.size(); }
};

// Interior crop offset used to tile a dimension with whole patches.
int patch_margin( std::size_t dim, int patch );

PatchGrid compute_patch_fractions( const Plane<std::uint8_t>& labels, int patch = 14, CancerDefinition cancer = CancerDefinition::CsPCaOnly,
	double tau = 0.95 );

struct PatchPair {
	int anchor = 0;
	int target = 0;
	bool operator==( const PatchPair& ) const = default;
	auto operator<=>( const PatchPair& ) const = default;
};

struct PairSet {
	// Adjacent cancer/cancer pairs.
	std::vector<PatchPair> positives;
	// Cancer anchor with a normal-gland target away from any cancer pixels.
	std::vector<PatchPair> negatives;
	// Adjacent normal/normal pairs; kept apart so the cancer-pair invariants stay checkable.
	std::vector<PatchPair> normal_positives;

	std::size_t size() const { return positives.size() + negatives.size() + normal_positives.size(); }
	bool empty() const { return size() == 0; }
};

nlohmann::json to_json( const PairSet& pairs );
PairSet pairs_from_json( const nlohmann::json& j );

int chebyshev( const PatchGrid& grid, int a, int b );

PairSet sample_pairs( const PatchGrid& grid, const ContrastiveConfig& cfg, std::uint64_t seed );

// Plain evaluation helpers.
double cosine_similarity( std::span<const double> a, std::span<const double> b, bool* degenerate = nullptr );
// Mean over pairs of (1 - s) for positives and max(0, s - m) for negatives; 0 when empty.
double contrastive_loss( const PairSet& pairs, const ag::Matrix<double>& embeddings, double margin );
double combined_loss( double segLoss, double contrastiveLoss, double alpha );

// Differentiable sum of per-pair terms over embeddings rows; `count` receives the pair count.
template<typename T>
ag::Var<T> contrastive_loss_sum( const PairSet& pairs, const ag::Var<T>& embeddings, T margin, std::size_t* count = nullptr );
template<typename T>
ag::Var<T> contrastive_loss( const PairSet& pairs, const ag::Var<T>& embeddings, T margin );
template<typename T>
ag::Var<T> combined_loss( const ag::Var<T>& segLoss, const ag::Var<T>& contrastiveLoss, T alpha );

struct ProjectionHeadConfig {
	int input_dim = 384;
	int hidden_dim = 2048;
	int bottleneck_dim = 256;
	int output_dim = 65536;

	static ProjectionHeadConfig desk( int inputDim ) { return { inputDim, 256, 64, 1024 }; }
	void validate() const;
};

// MLP (linear-BN-GELU x2, linear) -> L2 normalization -> weight-normalized linear.
template<typename T>
class ProjectionHead {
public:
	ProjectionHead() = default;
	ProjectionHead( const ProjectionHeadConfig& cfg, ParameterStore<T>& store, std::mt19937_64& rng, const std::string& prefix = "head." );

	const ProjectionHeadConfig& config() const { return cfg_; }
	// Returns both the unit-norm bottleneck h' and the output z.
	struct Output {
		ag::Var<T> normalized;
		ag::Var<T> embedding;
	};
	Output forward( const ag::Var<T>& x, bool training );

	std::vector<ag::BatchNormState<T>>& norm_states() { return bn_; }

private:
	ProjectionHeadConfig cfg_;
	std::vector<ag::Var<T>> w_, b_, gamma_, beta_;
	ag::Var<T> v_, g_;
	std::vector<ag::BatchNormState<T>> bn_;
};

template<typename T>
ag::Var<T> project( ProjectionHead<T>& head, const ag::Var<T>& tokens, bool training = false );

} // namespace provit
