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

#include "provit/screening.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <numbers>
#include <random>
#include <sstream>

#include <Eigen/Dense>

#include "provit/error.hpp"
#include "provit/phantom.hpp"

namespace provit {

namespace {

double sigmoid( double x )
{
	return x >= 0 ? 1.0 / ( 1.0 + std::exp( -x ) ) : std::exp( x ) / ( 1.0 + std::exp( x ) );
}

double indicator( double psa )
{
	return psa >= kPsaCutoff ? 1.0 : 0.0;
}

std::vector<std::string> split_csv( const std::string& line )
{
	std::vector<std::string> out;
	std::string cur;
	bool quoted = false;
	for( char c : line ) {
		if( c == '"' ) {
			quoted = !quoted;
		} else if( c == ',' && !quoted ) {
			out.push_back( cur );
			cur.clear();
		} else if( c != '\r' ) {
			cur += c;
		}
	}
	out.push_back( cur );
	return out;
}

ConfusionMetrics metrics_from( const std::vector<ScreeningRecord>& records, const std::vector<bool>& predicted )
{
	std::vector<double> s;
	std::vector<std::uint8_t> l;
	for( std::size_t i = 0; i < records.size(); ++i ) {
		s.push_back( predicted[i] ? 1.0 : 0.0 );
		l.push_back( static_cast<std::uint8_t>( records[i].label ) );
	}
	return confusion_metrics( s, l, 0.5 );
}

} // namespace

void ScreeningRecord::validate() const
{
	if( !( psa >= 0 ) || !std::isfinite( psa ) ) {
		throw ArgumentError( "screening record " + case_id + ": psa must be finite and non-negative" );
	}
	if( !( ai_score >= 0 && ai_score <= 1 ) ) {
		throw ArgumentError( "screening record " + case_id + ": ai_score must lie in [0, 1]" );
	}
	if( label != 0 && label != 1 ) {
		throw ArgumentError( "screening record " + case_id + ": label must be 0 or 1" );
	}
}

double StackingModel::probability( double psa, double aiScore ) const
{
	return sigmoid( beta[0] + beta[1] * indicator( psa ) + beta[2] * aiScore );
}

std::vector<ScreeningRecord> read_screening_csv( const std::string& path )
{
	std::ifstream in( path );
	if( !in ) {
		throw IoError( "cannot open screening table '" + path + "'" );
	}
	std::string line;
	if( !std::getline( in, line ) ) {
		throw FormatError( "screening table '" + path + "' is empty" );
	}
	const auto header = split_csv( line );
	std::map<std::string, std::size_t> col;
	for( std::size_t i = 0; i < header.size(); ++i ) {
		col[header[i]] = i;
	}
	for( const char* need : { "case_id", "psa", "ai_score", "label" } ) {
		if( !col.count( need ) ) {
			throw FormatError( "screening table lacks column '" + std::string( need ) + "'" );
		}
	}
	std::vector<ScreeningRecord> out;
	std::size_t lineNo = 1;
	while( std::getline( in, line ) ) {
		++lineNo;
		if( line.empty() || line == "\r" ) {
			continue;
		}
		const auto f = split_csv( line );
		if( f.size() != header.size() ) {
			throw FormatError( "screening table line " + std::to_string( lineNo ) + " has " + std::to_string( f.size() ) + " fields" );
		}
		ScreeningRecord r;
		try {
			r.case_id = f[col["case_id"]];
			r.psa = std::stod( f[col["psa"]] );
			r.ai_score = std::stod( f[col["ai_score"]] );
			r.label = std::stoi( f[col["label"]] );
		} catch( const std::exception& ) {
			throw FormatError( "screening table line " + std::to_string( lineNo ) + " has a malformed number" );
		}
		if( col.count( "cohort" ) ) {
			r.cohort = f[col["cohort"]];
		}
		r.validate();
		out.push_back( std::move( r ) );
	}
	return out;
}

void write_screening_csv( const std::vector<ScreeningRecord>& records, const std::string& path )
{
	std::ofstream out( path );
	if( !out ) {
		throw IoError( "cannot write '" + path + "'" );
	}
	out.precision( 17 );
	out << "case_id,psa,ai_score,label,cohort\n";
	for( const auto& r : records ) {
		out << r.case_id << ',' << r.psa << ',' << r.ai_score << ',' << r.label << ',' << r.cohort << '\n';
	}
}

double logistic_log_likelihood( const std::array<double, 3>& beta, const std::vector<ScreeningRecord>& records )
{
	double ll = 0.0;
	for( const auto& r : records ) {
		const double eta = beta[0] + beta[1] * indicator( r.psa ) + beta[2] * r.ai_score;
		// log(1 + e^eta) evaluated without overflow.
		const double softplus = eta > 0 ? eta + std::log1p( std::exp( -eta ) ) : std::log1p( std::exp( eta ) );
		ll += r.label * eta - softplus;
	}
	return ll;
}

StackingModel fit_logistic( const std::vector<ScreeningRecord>& records )
{
	if( records.empty() ) {
		throw ArgumentError( "fit_logistic: no records" );
	}
	std::size_t positives = 0;
	for( const auto& r : records ) {
		r.validate();
		positives += static_cast<std::size_t>( r.label );
	}
	if( positives == 0 || positives == records.size() ) {
		throw ArgumentError( "fit_logistic: both outcome classes are required" );
	}
	const auto n = static_cast<Eigen::Index>( records.size() );
	Eigen::MatrixXd X( n, 3 );
	Eigen::VectorXd y( n );
	for( Eigen::Index i = 0; i < n; ++i ) {
		X( i, 0 ) = 1.0;
		X( i, 1 ) = indicator( records[i].psa );
		X( i, 2 ) = records[i].ai_score;
		y( i ) = records[i].label;
	}
	if( Eigen::FullPivLU<Eigen::MatrixXd>( X.transpose() * X ).rank() < 3 ) {
		throw ArgumentError( "fit_logistic: features are perfectly collinear" );
	}
	StackingModel m;
	Eigen::Vector3d beta = Eigen::Vector3d::Zero();
	auto ll = [&] ( const Eigen::Vector3d& b ) { return logistic_log_likelihood( { b( 0 ), b( 1 ), b( 2 ) }, records ); };
	double current = ll( beta );
	m.log_likelihood.push_back( current );
	for( int it = 1; it <= 100; ++it ) {
		const Eigen::VectorXd eta = X * beta;
		Eigen::VectorXd p( n ), w( n );
		for( Eigen::Index i = 0; i < n; ++i ) {
			p( i ) = sigmoid( eta( i ) );
			w( i ) = p( i ) * ( 1.0 - p( i ) );
		}
		const Eigen::Matrix3d H = X.transpose() * w.asDiagonal() * X;
		const Eigen::Vector3d g = X.transpose() * ( y - p );
		Eigen::Vector3d delta = H.ldlt().solve( g );
		if( !delta.allFinite() ) {
			m.separation = true;
			break;
		}
		// Halve the step until the likelihood does not drop.
		Eigen::Vector3d next = beta + delta;
		double nextLl = ll( next );
		for( int h = 0; h < 30 && nextLl < current; ++h ) {
			delta *= 0.5;
			next = beta + delta;
			nextLl = ll( next );
		}
		if( nextLl < current ) {
			next = beta;
			nextLl = current;
			delta.setZero();
		}
		beta = next;
		current = nextLl;
		m.log_likelihood.push_back( current );
		m.iterations = it;
		if( beta.norm() > 50.0 ) {
			m.separation = true;
			break;
		}
		if( delta.cwiseAbs().maxCoeff() < 1e-8 ) {
			m.converged = true;
			break;
		}
	}
	m.beta = { beta( 0 ), beta( 1 ), beta( 2 ) };
	if( m.separation ) {
		m.warnings.push_back( "coefficients diverge (norm > 50): the outcome is (quasi-)completely separated" );
	} else if( !m.converged ) {
		m.warnings.push_back( "IRLS stopped after 100 iterations without meeting the tolerance" );
	}
	return m;
}

ConfusionMetrics psa_rule_metrics( const std::vector<ScreeningRecord>& records )
{
	if( records.empty() ) {
		throw ArgumentError( "psa_rule_metrics: no records" );
	}
	std::vector<bool> pred;
	for( const auto& r : records ) {
		pred.push_back( r.psa >= kPsaCutoff );
	}
	return metrics_from( records, pred );
}

ConfusionMetrics stacked_metrics( const StackingModel& model, const std::vector<ScreeningRecord>& records )
{
	if( !model.threshold ) {
		throw ArgumentError( "stacked_metrics: model has no calibrated threshold" );
	}
	std::vector<bool> pred;
	for( const auto& r : records ) {
		pred.push_back( model.probability( r ) >= *model.threshold );
	}
	return metrics_from( records, pred );
}

StackingModel calibrate_threshold( StackingModel model, const std::vector<ScreeningRecord>& records )
{
	std::vector<double> posProbs;
	std::size_t psaTp = 0;
	for( const auto& r : records ) {
		if( r.label == 1 ) {
			posProbs.push_back( model.probability( r ) );
			psaTp += r.psa >= kPsaCutoff;
		}
	}
	if( posProbs.empty() ) {
		throw ArgumentError( "calibrate_threshold: no positive records" );
	}
	if( psaTp == 0 ) {
		model.threshold = 1.0 - 1e-12;
		model.warnings.push_back( "PSA rule sensitivity is 0; threshold set just below 1" );
		return model;
	}
	// Sensitivity at t counts positives with probability >= t, so the largest
	// admissible t is the psaTp-th largest positive probability.
	std::sort( posProbs.begin(), posProbs.end(), std::greater<double>() );
	model.threshold = posProbs[psaTp - 1];
	return model;
}

ScreeningReport screen_report( const StackingModel& model, const std::vector<ScreeningRecord>& records )
{
	if( !model.threshold ) {
		throw ArgumentError( "screen_report: model has no calibrated threshold" );
	}
	ScreeningReport rep;
	rep.model = model;
	rep.n = records.size();
	rep.psa_rule = psa_rule_metrics( records );
	rep.stacked = stacked_metrics( model, records );
	for( const auto& r : records ) {
		const bool rule = r.psa >= kPsaCutoff;
		const bool stacked = model.probability( r ) >= *model.threshold;
		if( !rule && stacked ) {
			if( r.label ) {
				++rep.reclassification.up_true_positive;
				rep.reclassification.up_true_positive_ids.push_back( r.case_id );
			} else {
				++rep.reclassification.up_false_positive;
			}
		} else if( rule && !stacked ) {
			( r.label ? rep.reclassification.down_false_negative : rep.reclassification.down_true_negative ) += 1;
		}
	}
	return rep;
}

nlohmann::json to_json( const StackingModel& model )
{
	nlohmann::json j;
	j["beta0"] = model.beta[0];
	j["beta1"] = model.beta[1];
	j["beta2"] = model.beta[2];
	j["threshold"] = model.threshold ? nlohmann::json( *model.threshold ) : nlohmann::json( nullptr );
	j["iterations"] = model.iterations;
	j["converged"] = model.converged;
	j["separation"] = model.separation;
	j["warnings"] = model.warnings;
	return j;
}

namespace {

nlohmann::json metrics_json( const ConfusionMetrics& m )
{
	auto opt = [] ( const std::optional<double>& v ) { return v ? nlohmann::json( *v ) : nlohmann::json( nullptr ); };
	return { { "tp", m.tp }, { "fp", m.fp }, { "tn", m.tn }, { "fn", m.fn }, { "sensitivity", opt( m.sensitivity ) },
		{ "specificity", opt( m.specificity ) }, { "ppv", opt( m.ppv ) }, { "npv", opt( m.npv ) }, { "accuracy", opt( m.accuracy ) } };
}

} // namespace

nlohmann::json to_json( const ScreeningReport& report )
{
	const auto& rc = report.reclassification;
	return { { "n", report.n }, { "model", to_json( report.model ) }, { "psa_rule", metrics_json( report.psa_rule ) },
		{ "stacked", metrics_json( report.stacked ) },
		{ "reclassification", { { "up_true_positive", rc.up_true_positive }, { "up_false_positive", rc.up_false_positive },
			{ "down_true_negative", rc.down_true_negative }, { "down_false_negative", rc.down_false_negative },
			{ "up_true_positive_ids", rc.up_true_positive_ids } } } };
}

void write_comparison_csv( const ScreeningReport& report, const std::string& path )
{
	std::ofstream out( path );
	if( !out ) {
		throw IoError( "cannot write '" + path + "'" );
	}
	auto cell = [] ( const std::optional<double>& v ) { return v ? std::to_string( *v ) : std::string(); };
	out << "metric,psa_rule,stacked\n";
	out << "sensitivity," << cell( report.psa_rule.sensitivity ) << ',' << cell( report.stacked.sensitivity ) << '\n';
	out << "specificity," << cell( report.psa_rule.specificity ) << ',' << cell( report.stacked.specificity ) << '\n';
	out << "ppv," << cell( report.psa_rule.ppv ) << ',' << cell( report.stacked.ppv ) << '\n';
	out << "npv," << cell( report.psa_rule.npv ) << ',' << cell( report.stacked.npv ) << '\n';
	out << "accuracy," << cell( report.psa_rule.accuracy ) << ',' << cell( report.stacked.accuracy ) << '\n';
}

std::vector<ScreeningRecord> screening_records( const std::vector<LesionRecord>& lesions, const std::vector<CaseRecord>& cases,
	AiAggregate aggregate )
{
	std::vector<ScreeningRecord> out;
	for( const auto& c : cases ) {
		double best = 0.0, sum = 0.0;
		std::size_t n = 0;
		for( const auto& l : lesions ) {
			if( l.case_id == c.case_id ) {
				best = std::max( best, l.score );
				sum += l.score;
				++n;
			}
		}
		ScreeningRecord r;
		r.case_id = c.case_id;
		r.psa = c.psa;
		r.ai_score = aggregate == AiAggregate::Max ? best : ( n ? sum / static_cast<double>( n ) : 0.0 );
		r.label = c.max_gg >= 2 ? 1 : 0;
		out.push_back( std::move( r ) );
	}
	return out;
}

std::vector<ScreeningRecord> synthetic_screening_cohort( std::size_t n, std::uint64_t seed, double prevalence )
{
	if( !( prevalence > 0 && prevalence < 1 ) ) {
		throw ArgumentError( "prevalence must lie in (0, 1)" );
	}
	std::mt19937_64 rng( seed );
	std::uniform_real_distribution<double> u01( 0.0, 1.0 );
	std::normal_distribution<double> z( 0.0, 1.0 );
	std::vector<ScreeningRecord> out;
	for( std::size_t i = 0; i < n; ++i ) {
		ScreeningRecord r;
		char id[32];
		std::snprintf( id, sizeof( id ), "screen%04zu", i );
		r.case_id = id;
		r.label = u01( rng ) < prevalence ? 1 : 0;
		// Gland semi-axes follow the phantom ranges; gland volume sets the PSA baseline.
		const double a = 12.0 + 4.0 * u01( rng ), b = 16.0 + 5.0 * u01( rng ), c = 19.0 + 6.0 * u01( rng );
		const double glandMl = 4.0 / 3.0 * std::numbers::pi * a * b * c / 1000.0;
		const double lesionMl = r.label ? 0.3 + 2.7 * u01( rng ) : 0.0;
		r.psa = phantom_psa( 0.15 * glandMl, 1.5, lesionMl, 1.0, z( rng ) );
		r.ai_score = sigmoid( ( r.label ? 1.2 : -1.2 ) + z( rng ) );
		out.push_back( std::move( r ) );
	}
	return out;
}

} // namespace provit
