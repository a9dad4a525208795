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


#include <algorithm>
#include <cmath>
#include <random>
#include <vector>

#include <gtest/gtest.h>

#include "oracles.hpp"
#include "provit/error.hpp"
#include "provit/evaluation.hpp"
#include "provit/phantom.hpp"
#include "sextant_audit.hpp"

using namespace provit;

namespace {

using Scores = std::vector<double>;
using Labels = std::vector<std::uint8_t>;

// Scores drawn from a handful of levels so ties are common.
void random_instance( std::mt19937_64& rng, Scores& s, Labels& y, std::size_t maxN = 30 )
{
	const std::size_t n = std::uniform_int_distribution<std::size_t>( 2, maxN )( rng );
	const int levels = std::uniform_int_distribution<int>( 2, 12 )( rng );
	s.assign( n, 0.0 );
	y.assign( n, 0 );
	for( std::size_t i = 0; i < n; ++i ) {
		s[i] = std::uniform_int_distribution<int>( 0, levels - 1 )( rng ) / static_cast<double>( levels );
		y[i] = std::bernoulli_distribution( 0.4 )( rng ) ? 1 : 0;
	}
	y[0] = 1;
	y[1] = 0;
}

LabelVolume slab_gland( std::size_t firstSlice, std::size_t slices )
{
	LabelVolume l( Shape3{ 14, 8, 8 }, Spacing{} );
	for( std::size_t z = firstSlice; z < firstSlice + slices; ++z ) {
		for( std::size_t y = 2; y < 6; ++y ) {
			for( std::size_t x = 1; x < 7; ++x ) {
				l.at( z, y, x ) = kGland;
			}
		}
	}
	return l;
}

LesionRecord record( const std::string& caseId, bool positive, double score )
{
	LesionRecord r;
	r.case_id = caseId;
	r.kind = positive ? RecordKind::Positive : RecordKind::Negative;
	r.score = score;
	return r;
}

ProbabilityVolumes constant_probs( const Shape3& s, float cspca, float indolent )
{
	ProbabilityVolumes p;
	p.background = Volume( s, Spacing{}, 0.0f );
	p.gland = Volume( s, Spacing{}, 1.0f - cspca - indolent );
	p.indolent = Volume( s, Spacing{}, indolent );
	p.cspca = Volume( s, Spacing{}, cspca );
	return p;
}

} // namespace

// ---- sextants ------------------------------------------------------------------

TEST( Sextants, BandsFollowBaseFirstRemainder )
{
	const auto nine = partition_sextants( slab_gland( 2, 9 ) );
	EXPECT_EQ( nine.bands[0], std::make_pair( std::size_t{ 2 }, std::size_t{ 3 } ) );
	EXPECT_EQ( nine.bands[1], std::make_pair( std::size_t{ 5 }, std::size_t{ 3 } ) );
	EXPECT_EQ( nine.bands[2], std::make_pair( std::size_t{ 8 }, std::size_t{ 3 } ) );

	// Hand partition of slices 1..10: base 1-4, mid 5-7, apex 8-10.
	const auto ten = partition_sextants( slab_gland( 1, 10 ) );
	EXPECT_EQ( ten.bands[0], std::make_pair( std::size_t{ 1 }, std::size_t{ 4 } ) );
	EXPECT_EQ( ten.bands[1], std::make_pair( std::size_t{ 5 }, std::size_t{ 3 } ) );
	EXPECT_EQ( ten.bands[2], std::make_pair( std::size_t{ 8 }, std::size_t{ 3 } ) );

	const auto eleven = partition_sextants( slab_gland( 0, 11 ) );
	EXPECT_EQ( eleven.bands[0].second, 4u );
	EXPECT_EQ( eleven.bands[1].second, 4u );
	EXPECT_EQ( eleven.bands[2].second, 3u );
}

TEST( Sextants, CentroidTiesGoLeft )
{
	// Columns 1..6 give centroid 3.5; an odd span 1..5 puts column 3 on the centroid.
	LabelVolume l( Shape3{ 3, 1, 7 }, Spacing{} );
	for( std::size_t z = 0; z < 3; ++z ) {
		for( std::size_t x = 1; x <= 5; ++x ) {
			l.at( z, 0, x ) = kGland;
		}
	}
	const auto p = partition_sextants( l );
	EXPECT_DOUBLE_EQ( p.centroid_x, 3.0 );
	EXPECT_EQ( p.region[l.index( 0, 0, 3 )], sextant_id( SextantBand::Base, SextantSide::Left ) );
	EXPECT_EQ( p.region[l.index( 2, 0, 4 )], sextant_id( SextantBand::Apex, SextantSide::Right ) );
	EXPECT_EQ( p.region[l.index( 1, 0, 0 )], -1 );
	EXPECT_EQ( p.voxel_counts[0], 3u );
	EXPECT_EQ( p.voxel_counts[1], 2u );
}

TEST( Sextants, EmptyMaskAndSizeMismatchAreArgumentErrors )
{
	EXPECT_THROW( partition_sextants( LabelVolume( Shape3{ 2, 2, 2 }, Spacing{} ) ), ArgumentError );
	std::vector<std::uint8_t> mask( 7, 1 );
	EXPECT_THROW( partition_sextants( mask, Shape3{ 2, 2, 2 } ), ArgumentError );
}

TEST( Sextants, PhantomMasksTileTheGlandExactly )
{
	for( std::uint64_t seed = 0; seed < 12; ++seed ) {
		CohortProfile profile;
		profile.shape = { 12, 96, 96 };
		profile.spacing = { 3.0, 0.6, 0.6 };
		const auto spec = random_phantom_spec( seed, seed % 2 ? CaseKind::CsPCa : CaseKind::Negative, profile );
		const LabelVolume labels = generate_case( spec ).labels;
		const auto part = partition_sextants( labels );
		const auto t = sextant_audit::tile( part, labels );
		EXPECT_GT( t.gland, 0u );
		EXPECT_EQ( t.uncovered, 0u ) << seed;
		EXPECT_EQ( t.double_assigned, 0u ) << seed;
		EXPECT_EQ( t.outside_assigned, 0u ) << seed;
		EXPECT_EQ( t.mismatched, 0u ) << seed;
		EXPECT_EQ( t.counts, part.voxel_counts );
	}
}

TEST( Sextants, SymmetricGlandSplitsEvenly )
{
	PhantomSpec spec;
	spec.shape = { 12, 96, 96 };
	spec.spacing = { 3.0, 0.5, 0.5 };
	spec.gland.center = { 5.5, 47.5, 47.5 };
	spec.gland.semi_axes_mm = { 15.0, 18.0, 21.0 };
	const LabelVolume labels = generate_case( spec ).labels;
	const auto p = partition_sextants( labels );
	std::size_t left = 0, right = 0;
	for( int b = 0; b < 3; ++b ) {
		left += p.voxel_counts[b * 2];
		right += p.voxel_counts[b * 2 + 1];
	}
	EXPECT_LE( std::fabs( static_cast<double>( left ) - static_cast<double>( right ) ), 0.01 * static_cast<double>( left + right ) / 2.0 );
}

// ---- lesion records --------------------------------------------------------------

TEST( LesionRecords, NinetiethPercentileOfEvenGrid )
{
	std::vector<double> v;
	for( int i = 0; i <= 10; ++i ) {
		v.push_back( i / 10.0 );
	}
	std::shuffle( v.begin(), v.end(), std::mt19937_64( 3 ) );
	EXPECT_NEAR( percentile( v, 90.0 ), 0.9, 1e-15 );
	EXPECT_THROW( percentile( {}, 50.0 ), ArgumentError );
	EXPECT_THROW( percentile( { 1.0 }, 101.0 ), ArgumentError );
}

TEST( LesionRecords, PercentileMatchesDefinitionalOracle )
{
	std::mt19937_64 rng( 11 );
	for( int trial = 0; trial < 500; ++trial ) {
		const std::size_t n = std::uniform_int_distribution<std::size_t>( 1, 40 )( rng );
		std::vector<double> v( n );
		for( auto& x : v ) {
			x = std::uniform_real_distribution<double>( -2.0, 2.0 )( rng );
		}
		const double q = std::uniform_real_distribution<double>( 0.0, 100.0 )( rng );
		EXPECT_NEAR( percentile( v, q ), oracle::percentile( v, q ), 1e-12 );
		EXPECT_NEAR( percentile( v, 90.0 ), oracle::percentile( v, 90.0 ), 1e-12 );
	}
}

TEST( LesionRecords, AllNegativeCaseGivesSixNegatives )
{
	LabelVolume labels = slab_gland( 2, 9 );
	Volume prob( labels.shape, Spacing{}, 0.2f );
	const auto part = partition_sextants( labels );
	const auto recs = build_lesion_records( part, labels, prob, CancerDefinition::CsPCaOnly, "c" );
	ASSERT_EQ( recs.size(), 6u );
	for( const auto& r : recs ) {
		EXPECT_EQ( r.kind, RecordKind::Negative );
		EXPECT_NEAR( r.score, 0.2, 1e-7 );
	}
	EXPECT_EQ( recs[0].region_id, "left_base" );
	EXPECT_EQ( recs[5].region_id, "right_apex" );
}

TEST( LesionRecords, SpanningLesionGivesOnePositive )
{
	const auto c = sextant_audit::spanning_lesion_case( 5 );
	ASSERT_GE( c.touched.size(), 2u );
	const auto part = partition_sextants( c.labels );
	Volume prob( c.labels.shape, Spacing{}, 0.1f );
	const auto recs = build_lesion_records( part, c.labels, prob, CancerDefinition::CsPCaOnly, "c", 4, 6.5 );
	const auto positives = std::count_if( recs.begin(), recs.end(), [] ( const LesionRecord& r ) { return r.kind == RecordKind::Positive; } );
	EXPECT_EQ( positives, 1 );
	EXPECT_EQ( recs.size() - 1, 6 - c.touched.size() );
	EXPECT_LE( recs.size() - 1, 4u );
	for( const auto& r : recs ) {
		if( r.kind == RecordKind::Negative ) {
			const int id = static_cast<int>( std::find_if( part.region.begin(), part.region.end(), [&] ( std::int8_t v ) {
				return v >= 0 && sextant_name( v ) == r.region_id;
			} ) - part.region.begin() );
			EXPECT_FALSE( c.touched.count( part.region[id] ) );
		} else {
			EXPECT_EQ( r.gg, 4 );
			EXPECT_DOUBLE_EQ( r.psa, 6.5 );
			EXPECT_TRUE( r.cspca );
		}
	}
}

TEST( LesionRecords, ComponentsAreTwentySixConnected )
{
	LabelVolume labels( Shape3{ 3, 6, 6 }, Spacing{ 2.0, 1.0, 1.0 }, kGland );
	labels.at( 0, 0, 0 ) = kCsPCa;
	labels.at( 1, 1, 1 ) = kCsPCa; // corner neighbour of the first voxel
	labels.at( 2, 5, 5 ) = kIndolent;
	const auto [ids, count] = cancer_components( labels, CancerDefinition::CsPCaOnly );
	EXPECT_EQ( count, 1 );
	EXPECT_EQ( ids[labels.index( 0, 0, 0 )], ids[labels.index( 1, 1, 1 )] );
	EXPECT_EQ( cancer_components( labels, CancerDefinition::AllCancer ).second, 2 );

	Volume prob( labels.shape, Spacing{}, 0.0f );
	prob.at( 0, 0, 0 ) = 0.25f;
	prob.at( 1, 1, 1 ) = 0.75f;
	const auto recs = build_lesion_records( partition_sextants( labels ), labels, prob, CancerDefinition::CsPCaOnly );
	ASSERT_EQ( recs[0].kind, RecordKind::Positive );
	EXPECT_NEAR( recs[0].score, 0.25 + 0.9 * 0.5, 1e-7 );
	EXPECT_NEAR( recs[0].volume_ml, 2 * 2.0 / 1000.0, 1e-15 );
}

TEST( LesionRecords, AllCancerModeFindsAtLeastAsManyPositives )
{
	CohortProfile profile;
	profile.shape = { 12, 96, 96 };
	profile.spacing = { 3.0, 0.6, 0.6 };
	for( std::uint64_t seed = 0; seed < 6; ++seed ) {
		const auto kind = seed % 2 ? CaseKind::CsPCa : CaseKind::Indolent;
		const LabelVolume labels = generate_case( random_phantom_spec( seed, kind, profile ) ).labels;
		const auto part = partition_sextants( labels );
		Volume prob( labels.shape, Spacing{}, 0.3f );
		auto count = [&] ( CancerDefinition mode ) {
			const auto recs = build_lesion_records( part, labels, prob, mode );
			return std::count_if( recs.begin(), recs.end(), [] ( const LesionRecord& r ) { return r.kind == RecordKind::Positive; } );
		};
		EXPECT_GE( count( CancerDefinition::AllCancer ), count( CancerDefinition::CsPCaOnly ) );
		if( kind == CaseKind::Indolent ) {
			EXPECT_EQ( count( CancerDefinition::CsPCaOnly ), 0 );
			EXPECT_GE( count( CancerDefinition::AllCancer ), 1 );
		}
	}
}

TEST( LesionRecords, MisalignedGeometryIsArgumentError )
{
	LabelVolume labels = slab_gland( 2, 9 );
	Volume prob( Shape3{ 14, 8, 7 }, Spacing{}, 0.2f );
	EXPECT_THROW( build_lesion_records( partition_sextants( labels ), labels, prob, CancerDefinition::CsPCaOnly ), ArgumentError );
}

TEST( LesionRecords, AllCancerModeSumsIndolentAndCsPCa )
{
	const auto p = constant_probs( Shape3{ 1, 2, 2 }, 0.3f, 0.25f );
	EXPECT_FLOAT_EQ( lesion_probability( p, CancerDefinition::CsPCaOnly ).data[0], 0.3f );
	EXPECT_FLOAT_EQ( lesion_probability( p, CancerDefinition::AllCancer ).data[3], 0.55f );
}

// ---- ranking metrics -------------------------------------------------------------

TEST( Auroc, HandExamples )
{
	EXPECT_DOUBLE_EQ( auroc( Scores{ 0.9, 0.8, 0.1, 0.2 }, Labels{ 1, 1, 0, 0 } ), 1.0 );
	EXPECT_DOUBLE_EQ( auroc( Scores{ 0.4, 0.4, 0.4 }, Labels{ 1, 0, 1 } ), 0.5 );
	EXPECT_DOUBLE_EQ( auroc( Scores{ 0.6, 0.4, 0.5, 0.3 }, Labels{ 1, 1, 0, 0 } ), 0.75 );
	EXPECT_THROW( auroc( Scores{ 0.1, 0.2 }, Labels{ 1, 1 } ), UndefinedMetricError );
	EXPECT_THROW( auroc( Scores{ 0.1, 0.2 }, Labels{ 1 } ), ArgumentError );
}

TEST( Auroc, MatchesRationalPairCount )
{
	std::mt19937_64 rng( 2024 );
	Scores s;
	Labels y;
	for( int trial = 0; trial < 1000; ++trial ) {
		random_instance( rng, s, y );
		const auto f = oracle::auroc_fraction( s, y );
		// The implementation divides the same integers, so equality is exact.
		EXPECT_EQ( auroc( s, y ), static_cast<double>( f.num ) / static_cast<double>( f.den ) ) << trial;
	}
}

TEST( Auroc, InvariantUnderMonotoneMaps )
{
	std::mt19937_64 rng( 7 );
	Scores s;
	Labels y;
	for( int trial = 0; trial < 200; ++trial ) {
		random_instance( rng, s, y );
		Scores cubed = s, squashed = s;
		for( std::size_t i = 0; i < s.size(); ++i ) {
			cubed[i] = std::pow( s[i], 3.0 );
			squashed[i] = std::exp( 2.0 * s[i] ) - 5.0;
		}
		EXPECT_EQ( auroc( s, y ), auroc( cubed, y ) );
		EXPECT_EQ( auroc( s, y ), auroc( squashed, y ) );
	}
}

TEST( Auprc, HandExamples )
{
	EXPECT_DOUBLE_EQ( auprc( Scores{ 0.9, 0.8, 0.2, 0.1 }, Labels{ 1, 1, 0, 0 } ), 1.0 );
	EXPECT_DOUBLE_EQ( auprc( Scores{ 0.9, 0.8, 0.7, 0.1 }, Labels{ 0, 0, 0, 1 } ), 0.25 );
	EXPECT_DOUBLE_EQ( auprc( Scores{ 0.3, 0.2 }, Labels{ 1, 1 } ), 1.0 );
	// Ranks 1 and 3: (1/1 + 2/3) / 2.
	EXPECT_NEAR( auprc( Scores{ 0.9, 0.8, 0.7 }, Labels{ 1, 0, 1 } ), ( 1.0 + 2.0 / 3.0 ) / 2.0, 1e-15 );
	EXPECT_THROW( auprc( Scores{ 0.3, 0.2 }, Labels{ 0, 0 } ), UndefinedMetricError );
}

TEST( DeLong, VarianceMatchesJackknifeOnFixture )
{
	const Scores s{ 0.91, 0.35, 0.72, 0.72, 0.18, 0.66, 0.44, 0.81, 0.27, 0.53 };
	const Labels y{ 1, 0, 1, 0, 0, 1, 0, 1, 0, 1 };
	const auto r = delong( s, y );
	EXPECT_NEAR( r.variance, oracle::delong_variance_jackknife( s, y ), 1e-10 );
	EXPECT_DOUBLE_EQ( r.auroc, oracle::auroc( s, y ) );
	EXPECT_LE( r.ci_low, r.auroc );
	EXPECT_GE( r.ci_high, r.auroc );
}

TEST( DeLong, VarianceMatchesJackknifeOnRandomInstances )
{
	std::mt19937_64 rng( 99 );
	Scores s;
	Labels y;
	int checked = 0;
	while( checked < 200 ) {
		random_instance( rng, s, y );
		if( std::count( y.begin(), y.end(), 1 ) < 2 || std::count( y.begin(), y.end(), 0 ) < 2 ) {
			continue;
		}
		EXPECT_NEAR( delong( s, y ).variance, oracle::delong_variance_jackknife( s, y ), 1e-10 );
		++checked;
	}
}

TEST( DeLong, PerfectLargeScorerHasNarrowInterval )
{
	Scores s;
	Labels y;
	for( int i = 0; i < 400; ++i ) {
		s.push_back( i );
		y.push_back( i >= 200 );
	}
	const auto r = delong( s, y );
	EXPECT_DOUBLE_EQ( r.auroc, 1.0 );
	EXPECT_LT( r.ci_high - r.ci_low, 1e-9 );
	EXPECT_THROW( delong( Scores{ 0.1, 0.2, 0.3 }, Labels{ 1, 0, 0 } ), UndefinedMetricError );
}

TEST( DeLong, ComparingWithItselfGivesUnitP )
{
	const Scores s{ 0.91, 0.35, 0.72, 0.72, 0.18, 0.66, 0.44, 0.81 };
	const Labels y{ 1, 0, 1, 0, 0, 1, 0, 1 };
	const auto c = delong_compare( s, s, y );
	EXPECT_DOUBLE_EQ( c.p_value, 1.0 );
	EXPECT_DOUBLE_EQ( c.z, 0.0 );
	EXPECT_FALSE( c.degenerate );

	// A scorer that only follows record order: AUROC 8/16.
	const Scores worse{ 0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8 };
	const auto d = delong_compare( s, worse, y );
	EXPECT_DOUBLE_EQ( d.auroc_b, 0.5 );
	EXPECT_GT( d.auroc_a, d.auroc_b );
	EXPECT_GT( d.z, 0.0 );
	EXPECT_LT( d.p_value, 1.0 );
	EXPECT_THROW( delong_compare( s, Scores( 3, 0.0 ), y ), ArgumentError );
}

// ---- masks and thresholds ----------------------------------------------------------

TEST( Dice, ExamplesAndSymmetry )
{
	Labels a( 200, 0 ), b( 200, 0 );
	for( int i = 0; i < 100; ++i ) {
		a[i] = 1;
		b[i + 50] = 1;
	}
	EXPECT_DOUBLE_EQ( dice( a, a ).value, 1.0 );
	EXPECT_DOUBLE_EQ( dice( a, b ).value, 0.5 );
	Labels c( 200, 0 );
	for( int i = 100; i < 200; ++i ) {
		c[i] = 1;
	}
	EXPECT_DOUBLE_EQ( dice( a, c ).value, 0.0 );
	const Labels none( 200, 0 );
	const auto e = dice( none, none );
	EXPECT_DOUBLE_EQ( e.value, 1.0 );
	EXPECT_TRUE( e.both_empty );
	EXPECT_FALSE( dice( a, b ).both_empty );

	std::mt19937_64 rng( 4 );
	for( int t = 0; t < 50; ++t ) {
		Labels p( 64 ), q( 64 );
		for( std::size_t i = 0; i < 64; ++i ) {
			p[i] = rng() & 1;
			q[i] = rng() & 1;
		}
		EXPECT_EQ( dice( p, q ).value, dice( q, p ).value );
	}
	EXPECT_THROW( dice( a, Labels( 3, 0 ) ), ArgumentError );
}

TEST( Threshold, PerfectSeparationPicksLowestCandidateInGap )
{
	// The gap between 0.3 and 0.7 holds no observed score, so 0.7 is the lowest optimal cut.
	EXPECT_DOUBLE_EQ( select_threshold( Scores{ 0.1, 0.3, 0.7, 0.9 }, Labels{ 0, 0, 1, 1 } ), 0.7 );
	EXPECT_THROW( select_threshold( Scores{ 0.1, 0.3 }, Labels{ 0, 0 } ), UndefinedMetricError );
}

TEST( Threshold, SixRecordFixtureMatchesExhaustiveSearch )
{
	const Scores s{ 0.2, 0.8, 0.4, 0.6, 0.55, 0.3 };
	const Labels y{ 0, 1, 1, 0, 1, 0 };
	const auto best = oracle::youden( s, y );
	EXPECT_DOUBLE_EQ( select_threshold( s, y ), best.threshold );
	// Cuts at 0.4 (TP 3, TN 2) and 0.55 (TP 2, TN 2) rank first and second.
	EXPECT_DOUBLE_EQ( best.threshold, 0.4 );
}

TEST( Threshold, MatchesExhaustiveSearchOnRandomInstances )
{
	std::mt19937_64 rng( 31 );
	Scores s;
	Labels y;
	for( int trial = 0; trial < 1000; ++trial ) {
		random_instance( rng, s, y );
		const double t = select_threshold( s, y );
		EXPECT_DOUBLE_EQ( t, oracle::youden( s, y ).threshold ) << trial;
		const auto m = confusion_metrics( s, y, t );
		const double j = *m.sensitivity + *m.specificity;
		for( double c : s ) {
			const auto o = confusion_metrics( s, y, c );
			EXPECT_GE( j, *o.sensitivity + *o.specificity - 1e-12 );
		}
	}
}

TEST( Confusion, EightRecordHandTable )
{
	// >= 0.5 calls: TP {0.9, 0.7, 0.5}, FN {0.2}, FP {0.6}, TN {0.4, 0.3, 0.1}.
	const Scores s{ 0.9, 0.7, 0.5, 0.2, 0.6, 0.4, 0.3, 0.1 };
	const Labels y{ 1, 1, 1, 1, 0, 0, 0, 0 };
	const auto m = confusion_metrics( s, y, 0.5 );
	EXPECT_EQ( m.tp, 3u );
	EXPECT_EQ( m.fn, 1u );
	EXPECT_EQ( m.fp, 1u );
	EXPECT_EQ( m.tn, 3u );
	EXPECT_DOUBLE_EQ( *m.sensitivity, 0.75 );
	EXPECT_DOUBLE_EQ( *m.specificity, 0.75 );
	EXPECT_DOUBLE_EQ( *m.ppv, 0.75 );
	EXPECT_DOUBLE_EQ( *m.npv, 0.75 );
	EXPECT_DOUBLE_EQ( *m.accuracy, 0.75 );

	const auto inverted = confusion_metrics( Scores{ 0.1, 0.9 }, Labels{ 1, 0 }, 0.5 );
	EXPECT_DOUBLE_EQ( *inverted.sensitivity, 0.0 );
	const auto perfect = confusion_metrics( Scores{ 0.9, 0.1 }, Labels{ 1, 0 }, 0.5 );
	EXPECT_DOUBLE_EQ( *perfect.sensitivity, 1.0 );
	EXPECT_DOUBLE_EQ( *perfect.specificity, 1.0 );
	EXPECT_DOUBLE_EQ( *perfect.ppv, 1.0 );
	EXPECT_DOUBLE_EQ( *perfect.npv, 1.0 );

	const auto noPositiveCalls = confusion_metrics( Scores{ 0.1, 0.2 }, Labels{ 1, 0 }, 0.5 );
	EXPECT_FALSE( noPositiveCalls.ppv.has_value() );
	EXPECT_THROW( confusion_metrics( s, y, std::nan( "" ) ), ArgumentError );
}

// ---- patient level ----------------------------------------------------------------

TEST( PatientLevel, MeanOfPerPatientAurocs )
{
	// Patient a separates perfectly; patient b has 0.6 > 0.5 once and 0.4 < 0.5 once.
	const std::vector<LesionRecord> recs{
		record( "a", true, 0.9 ), record( "a", false, 0.2 ), record( "a", false, 0.1 ),
		record( "b", true, 0.6 ), record( "b", true, 0.4 ), record( "b", false, 0.5 ),
		record( "c", false, 0.3 ),
	};
	std::size_t eligible = 0;
	EXPECT_DOUBLE_EQ( patient_auroc( recs, &eligible ), 0.75 );
	EXPECT_EQ( eligible, 2u );

	const auto rep = patient_level_metrics( recs, 0.5 );
	EXPECT_EQ( rep.positives, 3u );
	EXPECT_EQ( rep.negatives, 4u );
	EXPECT_LE( rep.pooled.ci_low, rep.pooled.auroc );
	EXPECT_GE( rep.pooled.ci_high, rep.pooled.auroc );
}

TEST( PatientLevel, SinglePatientEqualsPooled )
{
	const std::vector<LesionRecord> recs{ record( "a", true, 0.6 ), record( "a", true, 0.3 ), record( "a", false, 0.5 ),
		record( "a", false, 0.1 ) };
	const auto rep = patient_level_metrics( recs, 0.5 );
	EXPECT_DOUBLE_EQ( rep.patient_auroc, rep.pooled.auroc );
	EXPECT_THROW( patient_auroc( { record( "a", true, 0.6 ), record( "b", false, 0.1 ) } ), UndefinedMetricError );
}

// ---- statistics --------------------------------------------------------------------

TEST( Spearman, MonotoneAndTieFixture )
{
	const Scores x{ 1, 2, 3, 4, 5 };
	EXPECT_NEAR( spearman( x, Scores{ 2, 4, 8, 16, 32 } ).rho, 1.0, 1e-15 );
	EXPECT_NEAR( spearman( x, Scores{ 5, 3, 1, 0, -4 } ).rho, -1.0, 1e-15 );

	// y = {10, 20, 20, 40, 30} has midranks {1, 2.5, 2.5, 5, 4}; Pearson on ranks by hand:
	// deviations x {-2,-1,0,1,2}, y {-2,-0.5,-0.5,2,1}; sum xy 8.5, sum x² 10, sum y² 9.5.
	const auto r = spearman( x, Scores{ 10, 20, 20, 40, 30 }, 1, 2000 );
	EXPECT_NEAR( r.rho, 8.5 / std::sqrt( 10.0 * 9.5 ), 1e-14 );
	EXPECT_GT( r.p_value, 0.0 );
	EXPECT_LE( r.p_value, 1.0 );
	EXPECT_EQ( r.n, 5u );

	EXPECT_THROW( spearman( x, Scores( 5, 1.0 ) ), UndefinedMetricError );
	EXPECT_THROW( spearman( Scores{ 1, 2 }, Scores{ 1, 2 } ), ArgumentError );
}

TEST( Spearman, PermutationPIsReproducible )
{
	const Scores x{ 0.3, 1.2, 0.8, 2.5, 1.9, 0.1, 3.3 };
	const Scores y{ 1.0, 2.0, 1.5, 2.2, 3.1, 0.4, 2.9 };
	EXPECT_EQ( spearman( x, y, 17, 500 ).p_value, spearman( x, y, 17, 500 ).p_value );
}

TEST( Wilcoxon, ExactSmallSamples )
{
	const auto allUp = wilcoxon_signed_rank( Scores{ 0.1, 0.2, 0.3, 0.4, 0.5 } );
	EXPECT_DOUBLE_EQ( allUp.p_value, 2.0 / 32.0 );
	EXPECT_DOUBLE_EQ( allUp.w_plus, 15.0 );
	EXPECT_TRUE( allUp.exact );

	const auto balanced = wilcoxon_signed_rank( Scores{ 0.1, -0.1, 0.2, -0.2, 0.3, -0.3 } );
	EXPECT_DOUBLE_EQ( balanced.p_value, 1.0 );

	EXPECT_THROW( wilcoxon_signed_rank( Scores{ 0.1, 0.2, 0.3, 0.4 } ), ArgumentError );
	EXPECT_THROW( wilcoxon_signed_rank( Scores( 6, 0.0 ) ), UndefinedMetricError );
}

TEST( Wilcoxon, ExactPMatchesSignEnumeration )
{
	std::mt19937_64 rng( 8 );
	for( int trial = 0; trial < 40; ++trial ) {
		const std::size_t n = std::uniform_int_distribution<std::size_t>( 5, 10 )( rng );
		Scores d( n );
		for( auto& v : d ) {
			v = std::uniform_int_distribution<int>( -4, 4 )( rng ) + ( rng() & 1 ? 0.5 : -0.5 );
		}
		const auto r = wilcoxon_signed_rank( d );
		// Brute force over all 2^n sign flips of |d| with midranks.
		Scores mag( n );
		for( std::size_t i = 0; i < n; ++i ) {
			mag[i] = std::fabs( d[i] );
		}
		Scores rank( n );
		for( std::size_t i = 0; i < n; ++i ) {
			double less = 0, same = 0;
			for( std::size_t j = 0; j < n; ++j ) {
				less += mag[j] < mag[i];
				same += mag[j] == mag[i];
			}
			rank[i] = less + ( same + 1.0 ) / 2.0;
		}
		double w = 0;
		for( std::size_t i = 0; i < n; ++i ) {
			w += d[i] > 0 ? rank[i] : 0.0;
		}
		double lo = 0, hi = 0;
		for( std::size_t mask = 0; mask < ( std::size_t{ 1 } << n ); ++mask ) {
			double s = 0;
			for( std::size_t i = 0; i < n; ++i ) {
				s += ( mask >> i & 1 ) ? rank[i] : 0.0;
			}
			lo += s <= w + 1e-9;
			hi += s >= w - 1e-9;
		}
		const double p = std::min( 1.0, 2.0 * std::min( lo, hi ) / std::ldexp( 1.0, static_cast<int>( n ) ) );
		EXPECT_NEAR( r.p_value, p, 1e-12 ) << trial;
		EXPECT_DOUBLE_EQ( r.w_plus, w );
	}
}

TEST( Wilcoxon, LargeSampleUsesNormalApproximation )
{
	Scores d;
	for( int i = 1; i <= 30; ++i ) {
		d.push_back( i % 3 == 0 ? -i : i );
	}
	const auto r = wilcoxon_signed_rank( d );
	EXPECT_FALSE( r.exact );
	// W+ = 465 - 165 = 300 against mean 232.5 and variance 30·31·61/24, continuity-corrected.
	EXPECT_DOUBLE_EQ( r.w_plus, 300.0 );
	const double z = ( 300.0 - 232.5 - 0.5 ) / std::sqrt( 30.0 * 31.0 * 61.0 / 24.0 );
	EXPECT_NEAR( r.p_value, std::erfc( z / std::sqrt( 2.0 ) ), 1e-14 );
}

TEST( Stratification, QuartilesAndGradeGroups )
{
	std::vector<StratifiedItem> items;
	for( int i = 0; i < 8; ++i ) {
		StratifiedItem it;
		it.volume_ml = 0.5 + i;
		it.gg = 2 + i % 2;
		it.psa = 3.0 + 0.5 * i;
		it.score = 0.1 * i + 0.1;
		if( i % 2 == 0 ) {
			it.dice = 0.1 * i;
		}
		items.push_back( it );
	}
	const auto rep = stratify_and_correlate( items, 0.5, 3 );
	ASSERT_EQ( rep.volume_quartiles.size(), 4u );
	std::size_t total = 0;
	for( const auto& row : rep.volume_quartiles ) {
		total += row.n;
		EXPECT_EQ( row.n, 2u );
	}
	EXPECT_EQ( total, 8u );
	// Highest quartile holds scores 0.7 and 0.8, both detected.
	EXPECT_DOUBLE_EQ( *rep.volume_quartiles[3].detection_rate, 1.0 );
	EXPECT_DOUBLE_EQ( *rep.volume_quartiles[0].detection_rate, 0.0 );
	ASSERT_EQ( rep.gg_groups.size(), 2u );
	EXPECT_EQ( rep.gg_groups[0].label, "GG2" );
	EXPECT_EQ( rep.gg_groups[0].n, 4u );
	ASSERT_TRUE( rep.volume_vs_score.has_value() );
	EXPECT_NEAR( rep.volume_vs_score->rho, 1.0, 1e-12 );
	ASSERT_TRUE( rep.volume_vs_dice.has_value() );
	EXPECT_EQ( rep.volume_vs_dice->n, 4u );
}

TEST( Stratification, ConstantColumnsSkipCorrelation )
{
	std::vector<StratifiedItem> items( 5 );
	for( std::size_t i = 0; i < items.size(); ++i ) {
		items[i].volume_ml = 1.0 + static_cast<double>( i );
		items[i].psa = 4.0;
		items[i].score = 0.2 * static_cast<double>( i );
	}
	const auto rep = stratify_and_correlate( items, 0.5 );
	EXPECT_FALSE( rep.psa_vs_score.has_value() );
	EXPECT_FALSE( rep.volume_vs_dice.has_value() );
	EXPECT_TRUE( rep.volume_vs_score.has_value() );
}

// ---- per-case ------------------------------------------------------------------------

TEST( EvaluateCase, OneHotPredictionGivesPerfectDice )
{
	LabelVolume labels = slab_gland( 2, 9 );
	labels.at( 5, 3, 2 ) = kCsPCa;
	labels.at( 5, 3, 3 ) = kCsPCa;
	auto probs = constant_probs( labels.shape, 0.0f, 0.0f );
	for( std::size_t i = 0; i < labels.data.size(); ++i ) {
		probs.cspca.data[i] = labels.data[i] == kCsPCa ? 1.0f : 0.0f;
	}
	CaseRecord meta;
	meta.case_id = "x";
	const auto ev = evaluate_case( labels, probs, CancerDefinition::CsPCaOnly, meta );
	EXPECT_TRUE( ev.has_cancer );
	EXPECT_DOUBLE_EQ( ev.dice.value, 1.0 );
	std::vector<double> s;
	std::vector<std::uint8_t> y;
	for( const auto& r : ev.records ) {
		s.push_back( r.score );
		y.push_back( r.kind == RecordKind::Positive );
		EXPECT_EQ( r.case_id, "x" );
	}
	EXPECT_DOUBLE_EQ( auroc( s, y ), 1.0 );
}
