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
#include <map>
#include <optional>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "provit/autograd.hpp"
#include "provit/contrastive.hpp"
#include "provit/params.hpp"
#include "provit/volume.hpp"

namespace provit {

struct LoRAConfig {
	int rank = 8;
	double scale = 1.0;
	bool frozen_backbone = true;
};

// Feature-level fusion concatenates per-sequence center tokens into one decoder;
// probability-level fusion averages the per-sequence probability maps.
enum class FusionMode { Features, Probabilities };

struct ViTConfig {
	int patch_size = 14;
	int embed_dim = 96;
	int depth = 4;
	int heads = 4;
	int mlp_ratio = 4;
	int interior_hw = 252;
	int n_slices = 3;
	int decoder_channels = 16;
	bool use_axial_embed = true;
	std::optional<LoRAConfig> lora;
	// Weight bundle to initialize from; empty means seeded random init.
	std::string pretrained;
	std::vector<SequenceTag> sequences{ SequenceTag::T2, SequenceTag::ADC, SequenceTag::DWI };
	FusionMode fusion = FusionMode::Features;
	bool projection_head = true;
	ProjectionHeadConfig head = ProjectionHeadConfig::desk( 96 );
	std::uint64_t seed = 0;

	static ViTConfig desk();
	// ViT-S/14 geometry compatible with DINOv2 small checkpoints.
	static ViTConfig full();

	int grid() const { return interior_hw / patch_size; }
	int tokens_per_slice() const { return grid() * grid(); }
	int rim() const { return 2; }
	int input_hw() const { return interior_hw + 2 * rim(); }
	void validate() const;
};

nlohmann::json to_json( const ViTConfig& cfg );
ViTConfig vit_config_from_json( const nlohmann::json& j );
// Stable 64-bit hash of the canonical config JSON, as 16 hex digits.
std::string config_hash( const ViTConfig& cfg );

// Four-class per-pixel distribution {background, gland, indolent, csPCa} on the
// full input plane; the rim outside the decoded interior is background.
struct ProbabilityMap {
	int height = 0;
	int width = 0;
	ag::Matrix<float> probs; // (height * width) x 4

	float at( int y, int x, int cls ) const { return probs( y * width + x, cls ); }
};

struct ProbabilityVolumes {
	Volume background;
	Volume gland;
	Volume indolent;
	Volume cspca;
};

template<typename T>
class Model {
public:
	explicit Model( const ViTConfig& cfg );
	// Parameters are shared nodes, so a copy would alias the original.
	Model( const Model& ) = delete;
	Model& operator=( const Model& ) = delete;
	Model( Model&& ) = default;
	Model& operator=( Model&& ) = default;

	const ViTConfig& config() const { return cfg_; }
	ParameterStore<T>& params() { return params_; }
	const ParameterStore<T>& params() const { return params_; }
	ProjectionHead<T>* head() { return head_ ? &*head_ : nullptr; }

	bool training() const { return training_; }
	void set_training( bool training ) { training_ = training; }
	bool has_lora() const { return loraRank_ > 0; }

	// (3 * g * g) x (p * p) matrix of interior patches, z-major then row-major.
	ag::Matrix<T> patchify( const SliceStack& stack ) const;
	ag::Var<T> tokenize( const SliceStack& stack );
	ag::Var<T> encode( const ag::Var<T>& tokens );
	// Tokens of the center slice, (g * g) x embed_dim.
	ag::Var<T> center_tokens( const ag::Var<T>& features ) const;
	// Interior logits, (interior * interior) x 4.
	ag::Var<T> decode_logits( const ag::Var<T>& centerFeatures, SequenceTag sequence );
	ag::Var<T> fusion_logits( const std::vector<std::pair<SequenceTag, ag::Var<T>>>& centerFeatures );

	void add_lora( const LoRAConfig& lora );
	void freeze_backbone();

	std::vector<std::string> decoder_names() const;

private:
	void init_decoder( const std::string& name, int inputDim, std::mt19937_64& rng );
	ag::Var<T> run_decoder( const std::string& name, const ag::Var<T>& x );
	const ag::Var<T>& p( const std::string& name ) const { return params_.get( name ); }

	ViTConfig cfg_;
	ParameterStore<T> params_;
	std::optional<ProjectionHead<T>> head_;
	bool training_ = false;
	int loraRank_ = 0;
	double loraScale_ = 1.0;
};

// Names every backbone parameter (patch embedding, planar positions, blocks, final norm).
bool is_backbone_parameter( const std::string& name );

template<typename T>
ag::Var<T> tokenize( const SliceStack& stack, Model<T>& model );
template<typename T>
ag::Var<T> encode( const ag::Var<T>& tokens, Model<T>& model );

ProbabilityMap probability_map( const ag::Matrix<float>& interiorLogits, int interior, int rim );
template<typename T>
ProbabilityMap decode_sequence( const ag::Var<T>& centerFeatures, Model<T>& model, SequenceTag sequence );
// Inputs must follow the model's sequence order exactly.
template<typename T>
ProbabilityMap fuse_mpmri( const std::vector<std::pair<SequenceTag, ag::Var<T>>>& centerFeatures, Model<T>& model );

// Adds rank-r adapters to the query and value projections. Throws when the rank
// exceeds the embedding width or adapters already exist.
template<typename T>
void apply_lora( Model<T>& model, const LoRAConfig& lora );

// Full per-slice inference over a case. Volumes must be preprocessed, share a
// shape, and follow the model's sequence order. When a slice mask is given,
// unmasked slices are not run and read as background.
ProbabilityVolumes predict_volume( Model<float>& model, const std::vector<Volume>& sequences, int threads = 1,
	const std::vector<bool>* slices = nullptr );
// Probabilities for one axial slice.
ProbabilityMap predict_slice( Model<float>& model, const std::vector<Volume>& sequences, std::size_t z );

} // namespace provit
