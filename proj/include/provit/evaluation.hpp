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
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "provit/contrastive.hpp"
#include "provit/model.hpp"
#include "provit/volume.hpp"

namespace provit {

// Slice index is taken to increase from base toward apex.
enum class SextantBand { Base = 0, Mid = 1, Apex = 2 };
enum class SextantSide { Left = 0, Right = 1 };

constexpr int sextant_id( SextantBand band, SextantSide side )
{
	return static_cast<int>( band ) * 2 + static_cast<int>( side );
}
std::string sextant_name( int id );

struct SextantPartition {
	Shape3 shape;
	// -1 outside the gland, otherwise sextant_id.
	std::vector<std::int8_t> region;
	std::array<std::size_t, 6> voxel_counts{};
	// First slice and slice count of each band.
	std::array<std::pair<std::size_t, std::size_t>, 3> bands{};
	double centroid_x = 0.0;

	std::size_t index( std::size_t z, std::size_t y, std::size_t x ) const { return ( z * shape.ny + y ) * shape.nx + x; }
};

SextantPartition partition_sextants( const LabelVolume& labels );
SextantPartition partition_sextants( std::span<const std::uint8_t> glandMask, const Shape3& shape );

enum class RecordKind { Positive, Negative };

struct LesionRecord {
	std::string case_id;
	// Positive records: "lesion<k>"; negatives: sextant name.
	std::string region_id;
	RecordKind kind = RecordKind::Negative;
	double score = 0.0;
	double volume_ml = 0.0;
	int gg = 0;
	double psa = 0.0;
	// Whether the component contains csPCa voxels (positives only).
	bool cspca = false;
};

// Linear interpolation at rank q * (n - 1) / 100 of the sorted values.
double percentile( std::vector<double> values, double q );

// The probability that drives scoring in each cancer mode.
Volume lesion_probability( const ProbabilityVolumes& probs, CancerDefinition mode );
// 26-connected components of cancer voxels; returns component ids (0 = none) and the count.
std::pair<std::vector<std::int32_t>, int> cancer_components( const LabelVolume& labels, CancerDefinition mode );

std::vector<LesionRecord> build_lesion_records( const SextantPartition& partition, const LabelVolume& labels, const Volume& probability,
	CancerDefinition mode, const std::string& caseId = "", int caseMaxGG = 0, double psa = 0.0 );

// Binary labels: nonzero marks a positive.
double auroc( std::span<const double> scores, std::span<const std::uint8_t> labels );
double auprc( std::span<const double> scores, std::span<const std::uint8_t> labels );

struct DeLongResult {
	double auroc = 0.0;
	double variance = 0.0;
	double ci_low = 0.0;
	double ci_high = 0.0;
};
DeLongResult delong( std::span<const double> scores, std::span<const std::uint8_t> labels );

struct DeLongComparison {
	double auroc_a = 0.0;
	double auroc_b = 0.0;
	double z = 0.0;
	double p_value = 1.0;
	// Zero variance with unequal AUROCs; p is then reported as below 1e-12.
	bool degenerate = false;
};
DeLongComparison delong_compare( std::span<const double> a, std::span<const double> b, std::span<const std::uint8_t> labels );

struct DiceResult {
	double value = 0.0;
	bool both_empty = false;
};
DiceResult dice( std::span<const std::uint8_t> pred, std::span<const std::uint8_t> truth );

// Youden-optimal threshold over record scores; score >= threshold is called positive.
double select_threshold( std::span<const double> scores, std::span<const std::uint8_t> labels );
double select_threshold( const std::vector<LesionRecord>& records );

struct ConfusionMetrics {
	std::size_t tp = 0, fp = 0, tn = 0, fn = 0;
	std::optional<double> sensitivity, specificity, ppv, npv, accuracy;
};
ConfusionMetrics confusion_metrics( std::span<const double> scores, std::span<const std::uint8_t> labels, double threshold );
ConfusionMetrics confusion_metrics( const std::vector<LesionRecord>& records, double threshold );

struct MetricsReport {
	double patient_auroc = 0.0;
	std::size_t eligible_patients = 0;
	DeLongResult pooled;
	std::optional<double> auprc;
	double threshold = 0.5;
	ConfusionMetrics confusion;
	std::optional<double> dice;
	std::size_t positives = 0;
	std::size_t negatives = 0;
};

// Mean of within-patient lesion AUROCs over patients having both record kinds.
double patient_auroc( const std::vector<LesionRecord>& records, std::size_t* eligible = nullptr );
MetricsReport patient_level_metrics( const std::vector<LesionRecord>& records, double threshold );

struct SpearmanResult {
	double rho = 0.0;
	double p_value = 1.0;
	std::size_t n = 0;
};
SpearmanResult spearman( std::span<const double> x, std::span<const double> y, std::uint64_t seed = 0, int permutations = 10000 );

struct WilcoxonResult {
	double w_plus = 0.0;
	std::size_t n = 0;
	double p_value = 1.0;
	bool exact = true;
};
WilcoxonResult wilcoxon_signed_rank( std::span<const double> differences );

struct StratumRow {
	std::string label;
	std::size_t n = 0;
	double mean_score = 0.0;
	std::optional<double> detection_rate;
	std::optional<double> mean_dice;
};

struct StratifiedItem {
	double volume_ml = 0.0;
	int gg = 0;
	double psa = 0.0;
	double score = 0.0;
	std::optional<double> dice;
};

struct StratificationReport {
	std::vector<StratumRow> volume_quartiles;
	std::vector<StratumRow> gg_groups;
	std::vector<StratumRow> psa_quartiles;
	std::optional<SpearmanResult> volume_vs_score;
	std::optional<SpearmanResult> volume_vs_dice;
	std::optional<SpearmanResult> psa_vs_score;
};
StratificationReport stratify_and_correlate( const std::vector<StratifiedItem>& items, double threshold, std::uint64_t seed = 0 );

// Per-case evaluation used by training validation and the evaluate command.
struct CaseEvaluation {
	std::string case_id;
	std::vector<LesionRecord> records;
	DiceResult dice;
	bool has_cancer = false;
};
CaseEvaluation evaluate_case( const LabelVolume& labels, const ProbabilityVolumes& probs, CancerDefinition mode, const CaseRecord& meta );

} // namespace provit
