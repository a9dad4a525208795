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

#include "provit/evaluation.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <random>

#include "provit/error.hpp"

namespace provit {

namespace {

bool is_cancer( std::uint8_t label, CancerDefinition mode )
{
	return mode == CancerDefinition::CsPCaOnly ? label == kCsPCa : label >= kIndolent;
}

void check_scores( std::span<const double> scores, std::span<const std::uint8_t> labels )
{
	if( scores.size() != labels.size() ) {
		throw ArgumentError( "scores and labels differ in length" );
	}
	for( double s : scores ) {
		if( std::isnan( s ) ) {
			throw ArgumentError( "scores contain NaN" );
		}
	}
}

void split_classes( std::span<const double> scores, std::span<const std::uint8_t> labels, std::vector<double>& pos, std::vector<double>& neg )
{
	check_scores( scores, labels );
	for( std::size_t i = 0; i < scores.size(); ++i ) {
		( labels[i] ? pos : neg ).push_back( scores[i] );
	}
}

void record_arrays( const std::vector<LesionRecord>& records, std::vector<double>& scores, std::vector<std::uint8_t>& labels )
{
	for( const auto& r : records ) {
		scores.push_back( r.score );
		labels.push_back( r.kind == RecordKind::Positive ? 1 : 0 );
	}
}

// Average ranks (1-based) with ties sharing the mean rank.
std::vector<double> midranks( std::span<const double> v )
{
	std::vector<std::size_t> order( v.size() );
	std::iota( order.begin(), order.end(), 0 );
	std::sort( order.begin(), order.end(), [&] ( std::size_t a, std::size_t b ) { return v[a] < v[b]; } );
	std::vector<double> ranks( v.size() );
	for( std::size_t i = 0; i < order.size(); ) {
		std::size_t j = i;
		while( j + 1 < order.size() && v[order[j + 1]] == v[order[i]] ) {
			++j;
		}
		const double r = 0.5 * static_cast<double>( i + j ) + 1.0;
		for( std::size_t k = i; k <= j; ++k ) {
			ranks[order[k]] = r;
		}
		i = j + 1;
	}
	return ranks;
}

double pearson( std::span<const double> a, std::span<const double> b )
{
	const double n = static_cast<double>( a.size() );
	const double ma = std::accumulate( a.begin(), a.end(), 0.0 ) / n;
	const double mb = std::accumulate( b.begin(), b.end(), 0.0 ) / n;
	double sab = 0, saa = 0, sbb = 0;
	for( std::size_t i = 0; i < a.size(); ++i ) {
		sab += ( a[i] - ma ) * ( b[i] - mb );
		saa += ( a[i] - ma ) * ( a[i] - ma );
		sbb += ( b[i] - mb ) * ( b[i] - mb );
	}
	return sab / std::sqrt( saa * sbb );
}

} // namespace

std::string sextant_name( int id )
{
	static const char* bands[3] = { "base", "mid", "apex" };
	if( id < 0 || id >= 6 ) {
		throw ArgumentError( "sextant id out of range" );
	}
	return std::string( id % 2 == 0 ? "left_" : "right_" ) + bands[id / 2];
}

SextantPartition partition_sextants( std::span<const std::uint8_t> glandMask, const Shape3& shape )
{
	if( glandMask.size() != shape.size() ) {
		throw ArgumentError( "gland mask size does not match shape" );
	}
	SextantPartition part;
	part.shape = shape;
	part.region.assign( shape.size(), -1 );
	std::size_t zMin = shape.nz, zMax = 0, count = 0;
	double sumX = 0.0;
	for( std::size_t z = 0; z < shape.nz; ++z ) {
		for( std::size_t y = 0; y < shape.ny; ++y ) {
			for( std::size_t x = 0; x < shape.nx; ++x ) {
				if( glandMask[part.index( z, y, x )] ) {
					zMin = std::min( zMin, z );
					zMax = std::max( zMax, z );
					sumX += static_cast<double>( x );
					++count;
				}
			}
		}
	}
	if( count == 0 ) {
		throw ArgumentError( "partition_sextants: gland mask is empty" );
	}
	part.centroid_x = sumX / static_cast<double>( count );
	const std::size_t n = zMax - zMin + 1;
	const std::size_t base = n / 3, rem = n % 3;
	const std::size_t sizes[3] = { base + ( rem >= 1 ? 1 : 0 ), base + ( rem >= 2 ? 1 : 0 ), base };
	std::size_t start = zMin;
	for( int b = 0; b < 3; ++b ) {
		part.bands[b] = { start, sizes[b] };
		start += sizes[b];
	}
	for( int b = 0; b < 3; ++b ) {
		for( std::size_t z = part.bands[b].first; z < part.bands[b].first + part.bands[b].second; ++z ) {
			for( std::size_t y = 0; y < shape.ny; ++y ) {
				for( std::size_t x = 0; x < shape.nx; ++x ) {
					const std::size_t i = part.index( z, y, x );
					if( !glandMask[i] ) {
						continue;
					}
					const auto side = static_cast<double>( x ) <= part.centroid_x ? SextantSide::Left : SextantSide::Right;
					const int id = sextant_id( static_cast<SextantBand>( b ), side );
					part.region[i] = static_cast<std::int8_t>( id );
					++part.voxel_counts[id];
				}
			}
		}
	}
	return part;
}

SextantPartition partition_sextants( const LabelVolume& labels )
{
	std::vector<std::uint8_t> mask( labels.data.size() );
	for( std::size_t i = 0; i < mask.size(); ++i ) {
		mask[i] = is_gland( labels.data[i] ) ? 1 : 0;
	}
	return partition_sextants( mask, labels.shape );
}

double percentile( std::vector<double> values, double q )
{
	if( values.empty() ) {
		throw ArgumentError( "percentile of an empty set" );
	}
	if( !( q >= 0.0 && q <= 100.0 ) ) {
		throw ArgumentError( "percentile rank must lie in [0, 100]" );
	}
	std::sort( values.begin(), values.end() );
	const double r = q * static_cast<double>( values.size() - 1 ) / 100.0;
	const auto lo = static_cast<std::size_t>( std::floor( r ) );
	const std::size_t hi = std::min( lo + 1, values.size() - 1 );
	const double frac = r - static_cast<double>( lo );
	return values[lo] + frac * ( values[hi] - values[lo] );
}

Volume lesion_probability( const ProbabilityVolumes& probs, CancerDefinition mode )
{
	Volume v = probs.cspca;
	if( mode == CancerDefinition::AllCancer ) {
		for( std::size_t i = 0; i < v.data.size(); ++i ) {
			v.data[i] += probs.indolent.data[i];
		}
	}
	return v;
}

std::pair<std::vector<std::int32_t>, int> cancer_components( const LabelVolume& labels, CancerDefinition mode )
{
	const Shape3 s = labels.shape;
	std::vector<std::int32_t> comp( s.size(), 0 );
	int next = 0;
	std::vector<std::size_t> queue;
	for( std::size_t seed = 0; seed < s.size(); ++seed ) {
		if( comp[seed] != 0 || !is_cancer( labels.data[seed], mode ) ) {
			continue;
		}
		comp[seed] = ++next;
		queue.assign( 1, seed );
		for( std::size_t head = 0; head < queue.size(); ++head ) {
			const std::size_t i = queue[head];
			const auto z = static_cast<long>( i / s.plane() );
			const auto y = static_cast<long>( ( i / s.nx ) % s.ny );
			const auto x = static_cast<long>( i % s.nx );
			for( long dz = -1; dz <= 1; ++dz ) {
				for( long dy = -1; dy <= 1; ++dy ) {
					for( long dx = -1; dx <= 1; ++dx ) {
						const long zz = z + dz, yy = y + dy, xx = x + dx;
						if( zz < 0 || yy < 0 || xx < 0 || zz >= static_cast<long>( s.nz ) || yy >= static_cast<long>( s.ny ) ||
							xx >= static_cast<long>( s.nx ) ) {
							continue;
						}
						const std::size_t j = labels.index( zz, yy, xx );
						if( comp[j] == 0 && is_cancer( labels.data[j], mode ) ) {
							comp[j] = next;
							queue.push_back( j );
						}
					}
				}
			}
		}
	}
	return { std::move( comp ), next };
}

std::vector<LesionRecord> build_lesion_records( const SextantPartition& partition, const LabelVolume& labels, const Volume& probability,
	CancerDefinition mode, const std::string& caseId, int caseMaxGG, double psa )
{
	if( labels.shape != partition.shape || probability.shape != labels.shape || labels.data.size() != labels.shape.size() ||
		probability.data.size() != labels.shape.size() ) {
		throw ArgumentError( "build_lesion_records: label, probability and partition geometries differ" );
	}
	const double voxelMl = labels.spacing.dz * labels.spacing.dy * labels.spacing.dx / 1000.0;
	auto clamp01 = [] ( double v ) { return std::clamp( v, 0.0, 1.0 ); };
	std::vector<LesionRecord> records;

	const auto [comp, nComp] = cancer_components( labels, mode );
	std::vector<std::vector<double>> values( nComp );
	std::vector<bool> hasCsPCa( nComp, false );
	std::array<bool, 6> sextantHasCancer{};
	for( std::size_t i = 0; i < comp.size(); ++i ) {
		if( comp[i] > 0 ) {
			values[comp[i] - 1].push_back( probability.data[i] );
			hasCsPCa[comp[i] - 1] = hasCsPCa[comp[i] - 1] || labels.data[i] == kCsPCa;
			if( partition.region[i] >= 0 ) {
				sextantHasCancer[partition.region[i]] = true;
			}
		}
	}
	for( int k = 0; k < nComp; ++k ) {
		LesionRecord r;
		r.case_id = caseId;
		r.region_id = "lesion" + std::to_string( k + 1 );
		r.kind = RecordKind::Positive;
		r.score = clamp01( percentile( values[k], 90.0 ) );
		r.volume_ml = static_cast<double>( values[k].size() ) * voxelMl;
		r.cspca = hasCsPCa[k];
		r.gg = r.cspca ? std::max( caseMaxGG, 2 ) : 1;
		r.psa = psa;
		records.push_back( std::move( r ) );
	}
	std::array<std::vector<double>, 6> sextantValues;
	for( std::size_t i = 0; i < partition.region.size(); ++i ) {
		const int id = partition.region[i];
		if( id >= 0 && !sextantHasCancer[id] ) {
			sextantValues[id].push_back( probability.data[i] );
		}
	}
	for( int id = 0; id < 6; ++id ) {
		if( sextantHasCancer[id] || sextantValues[id].empty() ) {
			continue;
		}
		LesionRecord r;
		r.case_id = caseId;
		r.region_id = sextant_name( id );
		r.kind = RecordKind::Negative;
		r.score = clamp01( percentile( sextantValues[id], 90.0 ) );
		r.volume_ml = static_cast<double>( sextantValues[id].size() ) * voxelMl;
		r.psa = psa;
		records.push_back( std::move( r ) );
	}
	return records;
}

double auroc( std::span<const double> scores, std::span<const std::uint8_t> labels )
{
	std::vector<double> pos, neg;
	split_classes( scores, labels, pos, neg );
	if( pos.empty() || neg.empty() ) {
		throw UndefinedMetricError( "AUROC requires at least one positive and one negative" );
	}
	std::sort( neg.begin(), neg.end() );
	// Twice the Mann-Whitney count keeps ties integral.
	unsigned long long twice = 0;
	for( double p : pos ) {
		const auto lo = std::lower_bound( neg.begin(), neg.end(), p ) - neg.begin();
		const auto hi = std::upper_bound( neg.begin(), neg.end(), p ) - neg.begin();
		twice += 2ULL * static_cast<unsigned long long>( lo ) + static_cast<unsigned long long>( hi - lo );
	}
	return static_cast<double>( twice ) / ( 2.0 * static_cast<double>( pos.size() ) * static_cast<double>( neg.size() ) );
}

double auprc( std::span<const double> scores, std::span<const std::uint8_t> labels )
{
	check_scores( scores, labels );
	const auto nPos = static_cast<std::size_t>( std::count_if( labels.begin(), labels.end(), [] ( std::uint8_t l ) { return l != 0; } ) );
	if( nPos == 0 ) {
		throw UndefinedMetricError( "AUPRC requires at least one positive" );
	}
	std::vector<std::size_t> order( scores.size() );
	std::iota( order.begin(), order.end(), 0 );
	std::sort( order.begin(), order.end(), [&] ( std::size_t a, std::size_t b ) { return scores[a] > scores[b]; } );
	double ap = 0.0, prevRecall = 0.0;
	std::size_t tp = 0, fp = 0;
	for( std::size_t i = 0; i < order.size(); ) {
		std::size_t j = i;
		while( j < order.size() && scores[order[j]] == scores[order[i]] ) {
			( labels[order[j]] ? tp : fp ) += 1;
			++j;
		}
		const double recall = static_cast<double>( tp ) / static_cast<double>( nPos );
		const double precision = static_cast<double>( tp ) / static_cast<double>( tp + fp );
		ap += ( recall - prevRecall ) * precision;
		prevRecall = recall;
		i = j;
	}
	return ap;
}

namespace {

double psi( double x, double y )
{
	return x > y ? 1.0 : ( x == y ? 0.5 : 0.0 );
}

struct Components {
	std::vector<double> v10;
	std::vector<double> v01;
	double auc = 0.0;
};

Components structural_components( const std::vector<double>& pos, const std::vector<double>& neg )
{
	Components c;
	c.v10.assign( pos.size(), 0.0 );
	c.v01.assign( neg.size(), 0.0 );
	for( std::size_t i = 0; i < pos.size(); ++i ) {
		for( std::size_t j = 0; j < neg.size(); ++j ) {
			const double s = psi( pos[i], neg[j] );
			c.v10[i] += s;
			c.v01[j] += s;
		}
	}
	for( double& v : c.v10 ) {
		v /= static_cast<double>( neg.size() );
	}
	for( double& v : c.v01 ) {
		v /= static_cast<double>( pos.size() );
	}
	c.auc = std::accumulate( c.v10.begin(), c.v10.end(), 0.0 ) / static_cast<double>( pos.size() );
	return c;
}

double covariance( const std::vector<double>& a, double ma, const std::vector<double>& b, double mb )
{
	double s = 0.0;
	for( std::size_t i = 0; i < a.size(); ++i ) {
		s += ( a[i] - ma ) * ( b[i] - mb );
	}
	return s / static_cast<double>( a.size() - 1 );
}

} // namespace

DeLongResult delong( std::span<const double> scores, std::span<const std::uint8_t> labels )
{
	std::vector<double> pos, neg;
	split_classes( scores, labels, pos, neg );
	if( pos.size() < 2 || neg.size() < 2 ) {
		throw UndefinedMetricError( "DeLong variance requires at least two records of each class" );
	}
	const Components c = structural_components( pos, neg );
	DeLongResult r;
	r.auroc = c.auc;
	r.variance = covariance( c.v10, c.auc, c.v10, c.auc ) / static_cast<double>( pos.size() ) +
		covariance( c.v01, c.auc, c.v01, c.auc ) / static_cast<double>( neg.size() );
	const double half = 1.959963984540054 * std::sqrt( std::max( r.variance, 0.0 ) );
	r.ci_low = std::max( 0.0, r.auroc - half );
	r.ci_high = std::min( 1.0, r.auroc + half );
	return r;
}

DeLongComparison delong_compare( std::span<const double> a, std::span<const double> b, std::span<const std::uint8_t> labels )
{
	if( a.size() != b.size() ) {
		throw ArgumentError( "delong_compare: score vectors differ in length" );
	}
	std::vector<double> posA, negA, posB, negB;
	split_classes( a, labels, posA, negA );
	split_classes( b, labels, posB, negB );
	if( posA.size() < 2 || negA.size() < 2 ) {
		throw UndefinedMetricError( "DeLong comparison requires at least two records of each class" );
	}
	const Components ca = structural_components( posA, negA );
	const Components cb = structural_components( posB, negB );
	const double m = static_cast<double>( posA.size() ), n = static_cast<double>( negA.size() );
	const double var = ( covariance( ca.v10, ca.auc, ca.v10, ca.auc ) + covariance( cb.v10, cb.auc, cb.v10, cb.auc ) -
		2.0 * covariance( ca.v10, ca.auc, cb.v10, cb.auc ) ) / m +
		( covariance( ca.v01, ca.auc, ca.v01, ca.auc ) + covariance( cb.v01, cb.auc, cb.v01, cb.auc ) -
		2.0 * covariance( ca.v01, ca.auc, cb.v01, cb.auc ) ) / n;
	DeLongComparison r;
	r.auroc_a = ca.auc;
	r.auroc_b = cb.auc;
	const double diff = ca.auc - cb.auc;
	if( !( var > 1e-300 ) ) {
		if( diff == 0.0 ) {
			r.p_value = 1.0;
		} else {
			r.degenerate = true;
			r.p_value = 0.0;
			r.z = diff > 0 ? INFINITY : -INFINITY;
		}
		return r;
	}
	r.z = diff / std::sqrt( var );
	r.p_value = std::erfc( std::fabs( r.z ) / std::sqrt( 2.0 ) );
	return r;
}

DiceResult dice( std::span<const std::uint8_t> pred, std::span<const std::uint8_t> truth )
{
	if( pred.size() != truth.size() ) {
		throw ArgumentError( "dice: masks differ in size" );
	}
	std::size_t a = 0, b = 0, both = 0;
	for( std::size_t i = 0; i < pred.size(); ++i ) {
		const bool p = pred[i] != 0, t = truth[i] != 0;
		a += p;
		b += t;
		both += p && t;
	}
	if( a + b == 0 ) {
		return { 1.0, true };
	}
	return { 2.0 * static_cast<double>( both ) / static_cast<double>( a + b ), false };
}

double select_threshold( std::span<const double> scores, std::span<const std::uint8_t> labels )
{
	std::vector<double> pos, neg;
	split_classes( scores, labels, pos, neg );
	if( pos.empty() || neg.empty() ) {
		throw UndefinedMetricError( "threshold selection requires both classes" );
	}
	std::sort( pos.begin(), pos.end() );
	std::sort( neg.begin(), neg.end() );
	std::vector<double> candidates( scores.begin(), scores.end() );
	std::sort( candidates.begin(), candidates.end() );
	candidates.erase( std::unique( candidates.begin(), candidates.end() ), candidates.end() );
	const auto P = static_cast<unsigned long long>( pos.size() ), N = static_cast<unsigned long long>( neg.size() );
	// J * P * N = TP * N + TN * P - P * N, so comparing TP * N + TN * P is exact.
	unsigned long long best = 0;
	double bestT = candidates.front();
	bool first = true;
	for( double t : candidates ) {
		const auto tp = static_cast<unsigned long long>( pos.end() - std::lower_bound( pos.begin(), pos.end(), t ) );
		const auto tn = static_cast<unsigned long long>( std::lower_bound( neg.begin(), neg.end(), t ) - neg.begin() );
		const unsigned long long j = tp * N + tn * P;
		if( first || j > best ) {
			best = j;
			bestT = t;
			first = false;
		}
	}
	return bestT;
}

double select_threshold( const std::vector<LesionRecord>& records )
{
	std::vector<double> s;
	std::vector<std::uint8_t> l;
	record_arrays( records, s, l );
	return select_threshold( s, l );
}

ConfusionMetrics confusion_metrics( std::span<const double> scores, std::span<const std::uint8_t> labels, double threshold )
{
	check_scores( scores, labels );
	if( !std::isfinite( threshold ) ) {
		throw ArgumentError( "confusion_metrics: threshold must be finite" );
	}
	ConfusionMetrics m;
	for( std::size_t i = 0; i < scores.size(); ++i ) {
		const bool predicted = scores[i] >= threshold;
		if( labels[i] ) {
			( predicted ? m.tp : m.fn ) += 1;
		} else {
			( predicted ? m.fp : m.tn ) += 1;
		}
	}
	auto rate = [] ( std::size_t num, std::size_t den ) -> std::optional<double> {
		if( den == 0 ) {
			return std::nullopt;
		}
		return static_cast<double>( num ) / static_cast<double>( den );
	};
	m.sensitivity = rate( m.tp, m.tp + m.fn );
	m.specificity = rate( m.tn, m.tn + m.fp );
	m.ppv = rate( m.tp, m.tp + m.fp );
	m.npv = rate( m.tn, m.tn + m.fn );
	m.accuracy = rate( m.tp + m.tn, scores.size() );
	return m;
}

ConfusionMetrics confusion_metrics( const std::vector<LesionRecord>& records, double threshold )
{
	std::vector<double> s;
	std::vector<std::uint8_t> l;
	record_arrays( records, s, l );
	return confusion_metrics( s, l, threshold );
}

double patient_auroc( const std::vector<LesionRecord>& records, std::size_t* eligible )
{
	std::map<std::string, std::pair<std::vector<double>, std::vector<std::uint8_t>>> byCase;
	for( const auto& r : records ) {
		auto& entry = byCase[r.case_id];
		entry.first.push_back( r.score );
		entry.second.push_back( r.kind == RecordKind::Positive ? 1 : 0 );
	}
	double sum = 0.0;
	std::size_t count = 0;
	for( const auto& [id, entry] : byCase ) {
		const auto& l = entry.second;
		const bool hasPos = std::find( l.begin(), l.end(), 1 ) != l.end();
		const bool hasNeg = std::find( l.begin(), l.end(), 0 ) != l.end();
		if( hasPos && hasNeg ) {
			sum += auroc( entry.first, l );
			++count;
		}
	}
	if( eligible != nullptr ) {
		*eligible = count;
	}
	if( count == 0 ) {
		throw UndefinedMetricError( "no patient has both positive and negative lesion records" );
	}
	return sum / static_cast<double>( count );
}

MetricsReport patient_level_metrics( const std::vector<LesionRecord>& records, double threshold )
{
	MetricsReport rep;
	rep.patient_auroc = patient_auroc( records, &rep.eligible_patients );
	std::vector<double> s;
	std::vector<std::uint8_t> l;
	record_arrays( records, s, l );
	rep.positives = static_cast<std::size_t>( std::count( l.begin(), l.end(), 1 ) );
	rep.negatives = l.size() - rep.positives;
	if( rep.positives >= 2 && rep.negatives >= 2 ) {
		rep.pooled = delong( s, l );
	} else {
		const double a = auroc( s, l );
		rep.pooled = { a, 0.0, a, a };
	}
	rep.auprc = auprc( s, l );
	rep.threshold = threshold;
	rep.confusion = confusion_metrics( s, l, threshold );
	return rep;
}

SpearmanResult spearman( std::span<const double> x, std::span<const double> y, std::uint64_t seed, int permutations )
{
	if( x.size() != y.size() ) {
		throw ArgumentError( "spearman: vectors differ in length" );
	}
	if( x.size() < 3 ) {
		throw ArgumentError( "spearman requires at least 3 pairs" );
	}
	auto constant = [] ( std::span<const double> v ) { return std::all_of( v.begin(), v.end(), [&] ( double a ) { return a == v[0]; } ); };
	if( constant( x ) || constant( y ) ) {
		throw UndefinedMetricError( "spearman: constant input has no rank correlation" );
	}
	const std::vector<double> rx = midranks( x );
	std::vector<double> ry = midranks( y );
	SpearmanResult r;
	r.n = x.size();
	r.rho = pearson( rx, ry );
	std::mt19937_64 rng( seed );
	int extreme = 0;
	for( int k = 0; k < permutations; ++k ) {
		std::shuffle( ry.begin(), ry.end(), rng );
		if( std::fabs( pearson( rx, ry ) ) >= std::fabs( r.rho ) - 1e-12 ) {
			++extreme;
		}
	}
	r.p_value = static_cast<double>( extreme + 1 ) / static_cast<double>( permutations + 1 );
	return r;
}

WilcoxonResult wilcoxon_signed_rank( std::span<const double> differences )
{
	std::vector<double> d;
	for( double v : differences ) {
		if( std::isnan( v ) ) {
			throw ArgumentError( "wilcoxon: differences contain NaN" );
		}
		if( v != 0.0 ) {
			d.push_back( v );
		}
	}
	if( d.empty() && !differences.empty() ) {
		throw UndefinedMetricError( "wilcoxon: all differences are zero" );
	}
	if( d.size() < 5 ) {
		throw ArgumentError( "wilcoxon requires at least 5 non-zero differences" );
	}
	std::vector<double> mag( d.size() );
	for( std::size_t i = 0; i < d.size(); ++i ) {
		mag[i] = std::fabs( d[i] );
	}
	const std::vector<double> ranks = midranks( mag );
	WilcoxonResult r;
	r.n = d.size();
	const std::size_t n = d.size();
	// Doubled midranks are integers, which makes the exact null distribution a subset-sum count.
	std::vector<int> twice( n );
	int wTwice = 0;
	for( std::size_t i = 0; i < n; ++i ) {
		twice[i] = static_cast<int>( std::lround( 2.0 * ranks[i] ) );
		if( d[i] > 0 ) {
			wTwice += twice[i];
		}
	}
	r.w_plus = wTwice / 2.0;
	if( n <= 20 ) {
		const int total = std::accumulate( twice.begin(), twice.end(), 0 );
		std::vector<double> ways( total + 1, 0.0 );
		ways[0] = 1.0;
		for( int t : twice ) {
			for( int s = total; s >= t; --s ) {
				ways[s] += ways[s - t];
			}
		}
		const double all = std::ldexp( 1.0, static_cast<int>( n ) );
		double lower = 0.0, upper = 0.0;
		for( int s = 0; s <= total; ++s ) {
			if( s <= wTwice ) {
				lower += ways[s];
			}
			if( s >= wTwice ) {
				upper += ways[s];
			}
		}
		r.p_value = std::min( 1.0, 2.0 * std::min( lower, upper ) / all );
		r.exact = true;
		return r;
	}
	const double nn = static_cast<double>( n );
	const double mean = nn * ( nn + 1.0 ) / 4.0;
	double tieTerm = 0.0;
	std::vector<double> sorted = mag;
	std::sort( sorted.begin(), sorted.end() );
	for( std::size_t i = 0; i < n; ) {
		std::size_t j = i;
		while( j < n && sorted[j] == sorted[i] ) {
			++j;
		}
		const double t = static_cast<double>( j - i );
		tieTerm += t * t * t - t;
		i = j;
	}
	const double var = nn * ( nn + 1.0 ) * ( 2.0 * nn + 1.0 ) / 24.0 - tieTerm / 48.0;
	const double z = std::max( 0.0, std::fabs( r.w_plus - mean ) - 0.5 ) / std::sqrt( var );
	r.p_value = std::min( 1.0, std::erfc( z / std::sqrt( 2.0 ) ) );
	r.exact = false;
	return r;
}

namespace {

std::vector<StratumRow> quartile_rows( const std::vector<StratifiedItem>& items, double StratifiedItem::*key, const std::string& unit,
	double threshold )
{
	std::vector<StratumRow> rows;
	if( items.empty() ) {
		return rows;
	}
	std::vector<double> keys;
	for( const auto& it : items ) {
		keys.push_back( it.*key );
	}
	const double cuts[3] = { percentile( keys, 25 ), percentile( keys, 50 ), percentile( keys, 75 ) };
	std::array<std::vector<const StratifiedItem*>, 4> groups;
	for( const auto& it : items ) {
		int q = 3;
		for( int c = 0; c < 3; ++c ) {
			if( it.*key <= cuts[c] ) {
				q = c;
				break;
			}
		}
		groups[q].push_back( &it );
	}
	for( int q = 0; q < 4; ++q ) {
		StratumRow row;
		char buf[96];
		if( q == 0 ) {
			std::snprintf( buf, sizeof( buf ), "Q1 (<= %.3g %s)", cuts[0], unit.c_str() );
		} else if( q < 3 ) {
			std::snprintf( buf, sizeof( buf ), "Q%d (%.3g-%.3g %s)", q + 1, cuts[q - 1], cuts[q], unit.c_str() );
		} else {
			std::snprintf( buf, sizeof( buf ), "Q4 (> %.3g %s)", cuts[2], unit.c_str() );
		}
		row.label = buf;
		row.n = groups[q].size();
		if( row.n > 0 ) {
			double score = 0.0, diceSum = 0.0;
			std::size_t hits = 0, diceN = 0;
			for( const auto* it : groups[q] ) {
				score += it->score;
				hits += it->score >= threshold;
				if( it->dice ) {
					diceSum += *it->dice;
					++diceN;
				}
			}
			row.mean_score = score / static_cast<double>( row.n );
			row.detection_rate = static_cast<double>( hits ) / static_cast<double>( row.n );
			if( diceN > 0 ) {
				row.mean_dice = diceSum / static_cast<double>( diceN );
			}
		}
		rows.push_back( std::move( row ) );
	}
	return rows;
}

std::optional<SpearmanResult> try_spearman( const std::vector<double>& x, const std::vector<double>& y, std::uint64_t seed )
{
	try {
		return spearman( x, y, seed );
	} catch( const Error& ) {
		return std::nullopt;
	}
}

} // namespace

StratificationReport stratify_and_correlate( const std::vector<StratifiedItem>& items, double threshold, std::uint64_t seed )
{
	StratificationReport rep;
	rep.volume_quartiles = quartile_rows( items, &StratifiedItem::volume_ml, "mL", threshold );
	rep.psa_quartiles = quartile_rows( items, &StratifiedItem::psa, "ng/mL", threshold );
	std::map<int, std::vector<const StratifiedItem*>> byGG;
	for( const auto& it : items ) {
		byGG[it.gg].push_back( &it );
	}
	for( const auto& [gg, group] : byGG ) {
		StratumRow row;
		row.label = "GG" + std::to_string( gg );
		row.n = group.size();
		double score = 0.0, diceSum = 0.0;
		std::size_t hits = 0, diceN = 0;
		for( const auto* it : group ) {
			score += it->score;
			hits += it->score >= threshold;
			if( it->dice ) {
				diceSum += *it->dice;
				++diceN;
			}
		}
		row.mean_score = score / static_cast<double>( row.n );
		row.detection_rate = static_cast<double>( hits ) / static_cast<double>( row.n );
		if( diceN > 0 ) {
			row.mean_dice = diceSum / static_cast<double>( diceN );
		}
		rep.gg_groups.push_back( std::move( row ) );
	}
	std::vector<double> vol, score, psa, dVol, dVal;
	for( const auto& it : items ) {
		vol.push_back( it.volume_ml );
		score.push_back( it.score );
		psa.push_back( it.psa );
		if( it.dice ) {
			dVol.push_back( it.volume_ml );
			dVal.push_back( *it.dice );
		}
	}
	rep.volume_vs_score = try_spearman( vol, score, seed );
	rep.volume_vs_dice = try_spearman( dVol, dVal, seed + 1 );
	rep.psa_vs_score = try_spearman( psa, score, seed + 2 );
	return rep;
}

CaseEvaluation evaluate_case( const LabelVolume& labels, const ProbabilityVolumes& probs, CancerDefinition mode, const CaseRecord& meta )
{
	CaseEvaluation ev;
	ev.case_id = meta.case_id;
	const SextantPartition part = partition_sextants( labels );
	const Volume p = lesion_probability( probs, mode );
	ev.records = build_lesion_records( part, labels, p, mode, meta.case_id, meta.max_gg, meta.psa );
	std::vector<std::uint8_t> pred( labels.data.size() ), truth( labels.data.size() );
	for( std::size_t i = 0; i < pred.size(); ++i ) {
		pred[i] = p.data[i] >= 0.5f;
		truth[i] = is_cancer( labels.data[i], mode );
		ev.has_cancer = ev.has_cancer || truth[i];
	}
	ev.dice = dice( pred, truth );
	return ev;
}

} // namespace provit
