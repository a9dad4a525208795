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
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "provit/evaluation.hpp"

namespace provit {

struct ScreeningRecord {
	std::string case_id;
	double psa = 0.0;
	double ai_score = 0.0;
	int label = 0;
	// Optional cohort tag for per-cohort calibration.
	std::string cohort;

	void validate() const;
};

constexpr double kPsaCutoff = 4.0;

struct StackingModel {
	// Intercept, PSA >= 4 indicator, AI score.
	std::array<double, 3> beta{};
	std::optional<double> threshold;
	int iterations = 0;
	bool converged = false;
	bool separation = false;
	std::vector<double> log_likelihood;
	std::vector<std::string> warnings;

	double probability( double psa, double aiScore ) const;
	double probability( const ScreeningRecord& r ) const { return probability( r.psa, r.ai_score ); }
};

std::vector<ScreeningRecord> read_screening_csv( const std::string& path );
void write_screening_csv( const std::vector<ScreeningRecord>& records, const std::string& path );

double logistic_log_likelihood( const std::array<double, 3>& beta, const std::vector<ScreeningRecord>& records );
// Newton-Raphson (IRLS) maximum likelihood fit with step halving to keep the likelihood non-decreasing.
StackingModel fit_logistic( const std::vector<ScreeningRecord>& records );

ConfusionMetrics psa_rule_metrics( const std::vector<ScreeningRecord>& records );
ConfusionMetrics stacked_metrics( const StackingModel& model, const std::vector<ScreeningRecord>& records );
// Largest threshold whose sensitivity is at least that of the PSA rule on the same records.
StackingModel calibrate_threshold( StackingModel model, const std::vector<ScreeningRecord>& records );

struct Reclassification {
	// PSA-negative cases the stacked rule calls positive, split by truth.
	std::size_t up_true_positive = 0;
	std::size_t up_false_positive = 0;
	// PSA-positive cases the stacked rule calls negative.
	std::size_t down_true_negative = 0;
	std::size_t down_false_negative = 0;
	std::vector<std::string> up_true_positive_ids;
};

struct ScreeningReport {
	ConfusionMetrics psa_rule;
	ConfusionMetrics stacked;
	Reclassification reclassification;
	StackingModel model;
	std::size_t n = 0;
};

ScreeningReport screen_report( const StackingModel& model, const std::vector<ScreeningRecord>& records );
nlohmann::json to_json( const StackingModel& model );
nlohmann::json to_json( const ScreeningReport& report );
void write_comparison_csv( const ScreeningReport& report, const std::string& path );

enum class AiAggregate { Max, Mean };

// One record per case from lesion records; label is 1 when max_gg >= 2.
std::vector<ScreeningRecord> screening_records( const std::vector<LesionRecord>& lesions, const std::vector<CaseRecord>& cases,
	AiAggregate aggregate = AiAggregate::Max );

// Seeded synthetic screening cohort. PSA follows the phantom PSA model driven by
// lesion volume; the AI score is a noisy logistic read-out of the label.
std::vector<ScreeningRecord> synthetic_screening_cohort( std::size_t n, std::uint64_t seed, double prevalence = 0.35 );

} // namespace provit
