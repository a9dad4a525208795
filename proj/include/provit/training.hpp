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
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "provit/contrastive.hpp"
#include "provit/evaluation.hpp"
#include "provit/manifest.hpp"
#include "provit/model.hpp"
#include "provit/phantom.hpp"
#include "provit/weights.hpp"

namespace provit {

// Cross-entropy (probabilities clamped at 1e-6) plus one minus the mean
// epsilon-smoothed soft Dice over classes 1..3. probs is N x 4 and labels has N entries.
template<typename T>
ag::Var<T> seg_loss( const ag::Var<T>& probs, std::span<const std::uint8_t> labels, T diceEps = T( 1 ) );
double seg_loss_value( const ag::Matrix<double>& probs, std::span<const std::uint8_t> labels, double diceEps = 1.0 );

// Center crop of a label plane to the decoded interior, flattened row-major.
std::vector<std::uint8_t> interior_labels( const Plane<std::uint8_t>& plane, int rim );

template<typename T>
struct SampleLosses {
	ag::Var<T> seg;
	// Sum of pair losses over every sequence; divide by the batch pair count.
	ag::Var<T> contrastive_sum;
	std::size_t pair_terms = 0;
};

// Forward pass of one slice-stack set (one stack per model sequence). Pairs are
// evaluated on each sequence's center tokens when given.
template<typename T>
SampleLosses<T> sample_losses( Model<T>& model, const std::vector<SliceStack>& stacks, const Plane<std::uint8_t>& labelPlane,
	const PairSet* pairs, double margin );

// Per-sample contribution to the batch objective (1 - a) * mean seg + a * mean pair loss.
template<typename T>
ag::Var<T> sample_objective( const SampleLosses<T>& s, double alpha, std::size_t batchSize, std::size_t batchPairTerms );

struct ParamGroupInfo {
	std::string name;
	ParamGroup group;
	double lr = 0.0;
};

template<typename T>
class Adam {
public:
	Adam( ParameterStore<T>& store, double baseLr, double backboneMult, double weightDecay, double beta1 = 0.9, double beta2 = 0.999,
		double eps = 1e-8 );

	// One update from the accumulated gradients; parameters without a gradient are skipped.
	void step();
	std::vector<ParamGroupInfo> groups() const;
	long steps() const { return t_; }

private:
	struct Slot {
		std::string name;
		ag::Var<T> var;
		ParamGroup group;
		ag::Matrix<T> m, v;
	};
	std::vector<Slot> slots_;
	double baseLr_, backboneMult_, weightDecay_, beta1_, beta2_, eps_;
	long t_ = 0;
};

struct AblationFlags {
	bool pretrained = true;
	bool lora_frozen = false;
	bool axial_embed = true;
	bool contrastive = true;
};

struct TrainConfig {
	double base_lr = 2e-4;
	double weight_decay = 1e-5;
	double backbone_lr_mult = 0.1;
	int batch_size = 32;
	int epochs = 20;
	// Overrides epochs when set.
	std::optional<int> max_steps;
	double alpha = 0.1;
	std::uint64_t seed = 0;
	double val_fraction = 0.2;
	// Validate every k epochs; 0 validates only after the last step.
	int validate_every = 1;
	CancerDefinition eval_mode = CancerDefinition::CsPCaOnly;
	ContrastiveConfig contrastive;
	AblationFlags flags;
	ViTConfig model;
	int lora_rank = 8;
	std::string output_dir;
	int threads = 1;

	void validate() const;
	// Model config after applying the ablation flags.
	ViTConfig effective_model() const;
	double effective_alpha() const { return flags.contrastive ? alpha : 0.0; }
};

nlohmann::json to_json( const TrainConfig& cfg );
TrainConfig train_config_from_json( const nlohmann::json& j );

struct HistoryRow {
	int step = 0;
	int epoch = 0;
	double seg_loss = 0.0;
	double contrastive_loss = 0.0;
	double total = 0.0;
	std::size_t pairs = 0;
};

struct CheckpointRecord {
	int epoch = 0;
	int step = 0;
	std::string weights_path;
	double metric = 0.0;
	// "patient_auroc", "pooled_auroc" or "chance" when neither is defined.
	std::string metric_source;
	std::string config_hash;
	double mean_train_loss = 0.0;

	nlohmann::json to_json() const;
};

// Index of the highest metric; ties keep the earliest record.
std::size_t select_best_checkpoint( const std::vector<CheckpointRecord>& records );

// Preprocessed case ready for sampling and evaluation.
struct PreparedCase {
	CaseRecord record;
	std::vector<Volume> sequences;
	LabelVolume labels;
};
std::vector<PreparedCase> prepare_cases( const Manifest& manifest, const std::vector<SequenceTag>& sequences );
// Generates and preprocesses a planned phantom cohort in memory.
std::vector<PreparedCase> prepare_cohort( const Cohort& cohort, const std::vector<SequenceTag>& sequences );

struct CohortEvaluation {
	std::vector<CaseEvaluation> cases;
	std::vector<LesionRecord> records;
	std::optional<double> patient_auroc;
	std::optional<double> pooled_auroc;
	// Mean per-case DSC over cases containing cancer.
	std::optional<double> mean_dice;
};
// Slices without gland are skipped and read as background when glandOnly is set.
CohortEvaluation evaluate_cohort( Model<float>& model, const std::vector<PreparedCase>& cases, CancerDefinition mode, bool glandOnly = true,
	int threads = 1 );

struct TrainResult {
	WeightBundle best;
	CheckpointRecord best_record;
	std::vector<CheckpointRecord> checkpoints;
	std::vector<HistoryRow> history;
	std::vector<std::string> train_cases;
	std::vector<std::string> val_cases;
	std::size_t pairs_requested = 0;
	std::optional<LoadReport> pretrained_report;
	std::vector<std::string> warnings;
};

using StepCallback = std::function<void( const HistoryRow& )>;
TrainResult train( const Manifest& manifest, const TrainConfig& cfg, const StepCallback& onStep = {} );
TrainResult train( const std::vector<PreparedCase>& cases, const TrainConfig& cfg, const StepCallback& onStep = {} );

void write_history_csv( const std::vector<HistoryRow>& history, const std::string& path );

struct AblationRow {
	std::string name;
	AblationFlags flags;
	double auroc = 0.0;
	std::optional<double> sensitivity;
	std::optional<double> specificity;
	std::size_t trainable_parameters = 0;
	std::size_t total_parameters = 0;
	std::size_t trainable_backbone = 0;
};

// The five flag combinations of the ablation table, in table order.
std::vector<std::pair<std::string, AblationFlags>> ablation_matrix();
std::vector<AblationRow> run_ablation_suite( const Manifest& manifest, const TrainConfig& base, const StepCallback& onStep = {} );
std::vector<AblationRow> run_ablation_suite( const std::vector<PreparedCase>& cases, const TrainConfig& base, const StepCallback& onStep = {} );
void write_ablation_csv( const std::vector<AblationRow>& rows, const std::string& path );

} // namespace provit
