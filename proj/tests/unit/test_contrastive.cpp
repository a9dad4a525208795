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

#include <cmath>
#include <random>
#include <set>

#include <gtest/gtest.h>

#include "gradcheck.hpp"
#include "label_grids.hpp"
#include "oracles.hpp"
#include "provit/contrastive.hpp"
#include "provit/error.hpp"

using namespace provit;

namespace {

// Labels a whole patch (r, c) of a plane whose grid starts at `margin`.
void fill_patch( Plane<std::uint8_t>& plane, int margin, int patch, int r, int c, std::uint8_t label )
{
	for( int y = 0; y < patch; ++y ) {
		for( int x = 0; x < patch; ++x ) {
			plane.at( static_cast<std::size_t>( margin + r * patch + y ), static_cast<std::size_t>( margin + c * patch + x ) ) = label;
		}
	}
}

Plane<std::uint8_t> gland_plane( int gridSide, int patch = 14, int rim = 2 )
{
	const auto side = static_cast<std::size_t>( gridSide * patch + 2 * rim );
	Plane<std::uint8_t> p( side, side, kBackground );
	for( int r = 0; r < gridSide; ++r ) {
		for( int c = 0; c < gridSide; ++c ) {
			fill_patch( p, rim, patch, r, c, kGland );
		}
	}
	return p;
}

// Gland disc plus a few cancer rectangles with ragged edges.
ag::Matrix<double> rows( std::initializer_list<std::initializer_list<double>> r )
{
	ag::Matrix<double> m( static_cast<Eigen::Index>( r.size() ), static_cast<Eigen::Index>( r.begin()->size() ) );
	Eigen::Index i = 0;
	for( const auto& row : r ) {
		Eigen::Index j = 0;
		for( double v : row ) m( i, j++ ) = v;
		++i;
	}
	return m;
}

} // namespace

TEST( PatchFractions, FullCancerPatch )
{
	auto plane = gland_plane( 3 );
	fill_patch( plane, 2, 14, 1, 1, kCsPCa );
	const PatchGrid g = compute_patch_fractions( plane );
	ASSERT_EQ( g.rows, 3 );
	ASSERT_EQ( g.cols, 3 );
	EXPECT_DOUBLE_EQ( g.rho_c[g.index( 1, 1 )], 1.0 );
	EXPECT_DOUBLE_EQ( g.rho_g[g.index( 1, 1 )], 0.0 );
	EXPECT_EQ( g.cls[g.index( 1, 1 )], PatchClass::Cancer );
	EXPECT_EQ( g.cls[g.index( 0, 0 )], PatchClass::NormalGland );
}

TEST( PatchFractions, HalfCancerIsExcluded )
{
	auto plane = gland_plane( 2 );
	for( int y = 0; y < 7; ++y ) {
		for( int x = 0; x < 14; ++x ) plane.at( 2 + y, 2 + x ) = kCsPCa;
	}
	const PatchGrid g = compute_patch_fractions( plane );
	EXPECT_DOUBLE_EQ( g.rho_c[0], 0.5 );
	EXPECT_DOUBLE_EQ( g.rho_g[0], 0.5 );
	EXPECT_EQ( g.cls[0], PatchClass::Excluded );
}

TEST( PatchFractions, BoundaryIsInclusive )
{
	// 380 of 400 pixels gives exactly 0.95.
	Plane<std::uint8_t> plane( 20, 20, kGland );
	for( int i = 0; i < 380; ++i ) plane.data[static_cast<std::size_t>( i )] = kCsPCa;
	const PatchGrid g = compute_patch_fractions( plane, 20 );
	EXPECT_DOUBLE_EQ( g.rho_c[0], 0.95 );
	EXPECT_EQ( g.cls[0], PatchClass::Cancer );

	plane.data[379] = kGland;
	EXPECT_EQ( compute_patch_fractions( plane, 20 ).cls[0], PatchClass::Excluded );
}

TEST( PatchFractions, CancerDefinitionModes )
{
	auto plane = gland_plane( 2 );
	fill_patch( plane, 2, 14, 0, 0, kIndolent );
	const PatchGrid cs = compute_patch_fractions( plane, 14, CancerDefinition::CsPCaOnly );
	const PatchGrid all = compute_patch_fractions( plane, 14, CancerDefinition::AllCancer );
	EXPECT_DOUBLE_EQ( cs.rho_c[0], 0.0 );
	EXPECT_EQ( cs.cls[0], PatchClass::NormalGland );
	EXPECT_DOUBLE_EQ( all.rho_c[0], 1.0 );
	EXPECT_EQ( all.cls[0], PatchClass::Cancer );
}

TEST( PatchFractions, TrailingMarginIsDroppedSymmetrically )
{
	EXPECT_EQ( patch_margin( 256, 14 ), 2 );
	EXPECT_EQ( patch_margin( 252, 14 ), 0 );
	Plane<std::uint8_t> plane( 256, 256, kBackground );
	// Rim pixels never count toward any patch.
	for( std::size_t i = 0; i < 256; ++i ) {
		plane.at( 0, i ) = plane.at( 1, i ) = plane.at( 254, i ) = plane.at( 255, i ) = kCsPCa;
		plane.at( i, 0 ) = plane.at( i, 1 ) = plane.at( i, 254 ) = plane.at( i, 255 ) = kCsPCa;
	}
	const PatchGrid g = compute_patch_fractions( plane );
	EXPECT_EQ( g.rows, 18 );
	for( double v : g.rho_c ) EXPECT_EQ( v, 0.0 );
}

TEST( PatchFractions, FractionsNeverExceedOne )
{
	std::mt19937_64 rng( 5 );
	for( int k = 0; k < 50; ++k ) {
		const PatchGrid g = compute_patch_fractions( label_grids::random_plane( rng, 6 ), 14, CancerDefinition::AllCancer );
		for( std::size_t i = 0; i < g.size(); ++i ) EXPECT_LE( g.rho_c[i] + g.rho_g[i], 1.0 + 1e-15 );
	}
}

TEST( SamplePairs, IsolatedCancerPatchHasNoPositives )
{
	auto plane = gland_plane( 5 );
	fill_patch( plane, 2, 14, 2, 2, kCsPCa );
	const PairSet p = sample_pairs( compute_patch_fractions( plane ), {}, 1 );
	EXPECT_TRUE( p.positives.empty() );
	EXPECT_TRUE( p.negatives.empty() ); // quota is balance * 0
}

TEST( SamplePairs, BlockPositivesMatchBruteForce )
{
	auto plane = gland_plane( 6 );
	for( int r = 1; r <= 2; ++r ) {
		for( int c = 1; c <= 2; ++c ) fill_patch( plane, 2, 14, r, c, kCsPCa );
	}
	const PatchGrid g = compute_patch_fractions( plane );
	const PairSet p = sample_pairs( g, {}, 3 );

	std::set<PatchPair> expected;
	for( int a = 0; a < static_cast<int>( g.size() ); ++a ) {
		for( int b = a + 1; b < static_cast<int>( g.size() ); ++b ) {
			if( g.cls[a] == PatchClass::Cancer && g.cls[b] == PatchClass::Cancer && chebyshev( g, a, b ) == 1 ) expected.insert( { a, b } );
		}
	}
	EXPECT_EQ( expected.size(), 6u );
	EXPECT_EQ( std::set<PatchPair>( p.positives.begin(), p.positives.end() ), expected );
	for( int a : { g.index( 1, 1 ), g.index( 1, 2 ), g.index( 2, 1 ), g.index( 2, 2 ) } ) {
		int n = 0;
		for( const auto& q : p.positives ) n += ( q.anchor == a || q.target == a );
		EXPECT_GE( n, 1 );
	}
}

TEST( SamplePairs, DiagonalNeighbourOfCancerIsNeverNegative )
{
	auto plane = gland_plane( 6 );
	fill_patch( plane, 2, 14, 0, 0, kCsPCa );
	fill_patch( plane, 2, 14, 0, 1, kCsPCa );
	// A few cancer pixels in (3, 3) keep its diagonal neighbours out.
	plane.at( 2 + 3 * 14 + 5, 2 + 3 * 14 + 5 ) = kCsPCa;
	const PatchGrid g = compute_patch_fractions( plane );
	ContrastiveConfig cfg;
	cfg.balance = 1000.0;
	const PairSet p = sample_pairs( g, cfg, 9 );
	ASSERT_FALSE( p.negatives.empty() );
	for( const auto& q : p.negatives ) {
		EXPECT_NE( q.target, g.index( 4, 4 ) );
		EXPECT_NE( q.target, g.index( 2, 2 ) );
		EXPECT_NE( q.target, g.index( 1, 1 ) );
		EXPECT_NE( q.target, g.index( 1, 2 ) );
	}
}

TEST( SamplePairs, NoCancerGivesEmptySet )
{
	EXPECT_TRUE( sample_pairs( compute_patch_fractions( gland_plane( 4 ) ), {}, 1 ).empty() );
}

TEST( SamplePairs, ConstraintsHoldOnRandomGrids )
{
	std::mt19937_64 rng( 2024 );
	std::size_t positives = 0, negatives = 0;
	for( int k = 0; k < 1000; ++k ) {
		ContrastiveConfig cfg;
		cfg.cancer = k % 2 ? CancerDefinition::AllCancer : CancerDefinition::CsPCaOnly;
		cfg.exclusion_radius = 1 + k % 3;
		const PatchGrid g = compute_patch_fractions( label_grids::random_plane( rng, 8 ), 14, cfg.cancer, cfg.tau );
		const PairSet p = sample_pairs( g, cfg, static_cast<std::uint64_t>( k ) );
		const auto audit = oracle::audit_pairs( g, p, cfg.tau, cfg.exclusion_radius );
		EXPECT_EQ( audit.bad_positive, 0u ) << "grid " << k;
		EXPECT_EQ( audit.bad_negative, 0u ) << "grid " << k;
		EXPECT_LE( p.negatives.size(), p.positives.size() );
		positives += audit.positives;
		negatives += audit.negatives;
	}
	// The generator must actually exercise both pair kinds.
	EXPECT_GT( positives, 500u );
	EXPECT_GT( negatives, 500u );
}

TEST( SamplePairs, ReproducibleAndBalanced )
{
	std::mt19937_64 rng( 77 );
	int checked = 0;
	for( int k = 0; k < 200; ++k ) {
		const PatchGrid g = compute_patch_fractions( label_grids::random_plane( rng, 8 ) );
		ContrastiveConfig cfg;
		const PairSet a = sample_pairs( g, cfg, 11 );
		const PairSet b = sample_pairs( g, cfg, 11 );
		EXPECT_EQ( a.positives, b.positives );
		EXPECT_EQ( a.negatives, b.negatives );
		EXPECT_EQ( a.normal_positives, b.normal_positives );
		EXPECT_EQ( to_json( a ).dump(), to_json( pairs_from_json( to_json( a ) ) ).dump() );

		cfg.balance = 1e9;
		const std::size_t available = sample_pairs( g, cfg, 11 ).negatives.size();
		EXPECT_EQ( a.negatives.size(), std::min( available, a.positives.size() ) );
		checked += available > 0 && !a.positives.empty();
	}
	EXPECT_GT( checked, 10 );
}

TEST( SamplePairs, SeedChangesUndersampling )
{
	auto plane = gland_plane( 10 );
	for( int r = 0; r < 3; ++r ) {
		for( int c = 0; c < 3; ++c ) fill_patch( plane, 2, 14, r, c, kCsPCa );
	}
	const PatchGrid g = compute_patch_fractions( plane );
	EXPECT_NE( sample_pairs( g, {}, 1 ).negatives, sample_pairs( g, {}, 2 ).negatives );
}

TEST( ContrastiveConfig, Validation )
{
	ContrastiveConfig c;
	EXPECT_NO_THROW( c.validate() );
	c.tau = 0.0;
	EXPECT_THROW( c.validate(), ArgumentError );
	c = {};
	c.margin = 1.0;
	EXPECT_THROW( c.validate(), ArgumentError );
	c = {};
	c.alpha = 1.5;
	EXPECT_THROW( c.validate(), ArgumentError );
}

TEST( Cosine, Examples )
{
	const std::vector<double> a{ 1, 0 }, b{ 0, 1 }, c{ -1, 0 }, z{ 0, 0 };
	EXPECT_DOUBLE_EQ( cosine_similarity( a, a ), 1.0 );
	EXPECT_DOUBLE_EQ( cosine_similarity( a, b ), 0.0 );
	EXPECT_DOUBLE_EQ( cosine_similarity( a, c ), -1.0 );
	bool degenerate = false;
	EXPECT_EQ( cosine_similarity( z, z, &degenerate ), 0.0 );
	EXPECT_TRUE( degenerate );
	EXPECT_THROW( cosine_similarity( a, std::vector<double>{ 1, 2, 3 } ), ArgumentError );
}

TEST( ContrastiveLoss, HandValues )
{
	PairSet pos;
	pos.positives = { { 0, 1 } };
	EXPECT_NEAR( contrastive_loss( pos, rows( { { 1, 2 }, { 1, 2 } } ), 0.5 ), 0.0, 1e-12 );

	// s = 0.5 and s = 0.9 against m = 0.5.
	const double t5 = std::acos( 0.5 ), t9 = std::acos( 0.9 );
	PairSet neg;
	neg.negatives = { { 0, 1 } };
	EXPECT_NEAR( contrastive_loss( neg, rows( { { 1, 0 }, { std::cos( t5 ), std::sin( t5 ) } } ), 0.5 ), 0.0, 1e-12 );
	EXPECT_NEAR( contrastive_loss( neg, rows( { { 1, 0 }, { std::cos( t9 ), std::sin( t9 ) } } ), 0.5 ), 0.4, 1e-12 );

	EXPECT_EQ( contrastive_loss( PairSet{}, rows( { { 1, 0 } } ), 0.5 ), 0.0 );
	EXPECT_THROW( contrastive_loss( pos, rows( { { 1, 0 } } ), 0.5 ), ArgumentError );

	// Mean over all three kinds: (0 + 0.4 + 1) / 3.
	PairSet mixed;
	mixed.positives = { { 0, 0 } };
	mixed.negatives = { { 0, 1 } };
	mixed.normal_positives = { { 0, 2 } };
	const auto m = rows( { { 1, 0 }, { std::cos( t9 ), std::sin( t9 ) }, { 0, 1 } } );
	EXPECT_NEAR( contrastive_loss( mixed, m, 0.5 ), 1.4 / 3.0, 1e-12 );
	EXPECT_NEAR( contrastive_loss( mixed, ag::constant<double>( m ), 0.5 ).item(), 1.4 / 3.0, 1e-12 );
}

TEST( CombinedLoss, HandValues )
{
	EXPECT_EQ( combined_loss( 0.37, 5.0, 0.0 ), 0.37 );
	EXPECT_NEAR( combined_loss( 1.0, 2.0, 0.1 ), 1.1, 1e-15 );
	const auto v = combined_loss( ag::constant<double>( ag::Matrix<double>::Constant( 1, 1, 1.0 ) ),
		ag::constant<double>( ag::Matrix<double>::Constant( 1, 1, 2.0 ) ), 0.1 );
	EXPECT_NEAR( v.item(), 1.1, 1e-15 );
}

TEST( ContrastiveLoss, Monotone )
{
	PairSet neg, pos;
	neg.negatives = { { 0, 1 } };
	pos.positives = { { 0, 1 } };
	double lastNeg = -1, lastPos = 3;
	for( double s = 0.55; s < 0.99; s += 0.05 ) {
		const double t = std::acos( s );
		const auto m = rows( { { 1, 0 }, { std::cos( t ), std::sin( t ) } } );
		const double ln = contrastive_loss( neg, m, 0.5 ), lp = contrastive_loss( pos, m, 0.5 );
		EXPECT_GT( ln, lastNeg );
		EXPECT_LT( lp, lastPos );
		lastNeg = ln;
		lastPos = lp;
	}
}

TEST( ProjectionHead, NormalizedBottleneckAndDeterminism )
{
	ParameterStore<double> store;
	std::mt19937_64 rng( 4 );
	ProjectionHead<double> head( { 10, 16, 8, 32 }, store, rng );
	ag::Matrix<double> x = gradcheck::random_matrix( rng, 6, 10 );
	x.row( 3 ) = x.row( 1 );
	x.row( 4 ) = 2.0 * x.row( 0 );
	ag::NoGradGuard guard;
	const auto out = head.forward( ag::constant<double>( x ), false );
	ASSERT_EQ( out.embedding.cols(), 32 );
	for( Eigen::Index i = 0; i < 6; ++i ) EXPECT_NEAR( out.normalized.value().row( i ).norm(), 1.0, 1e-12 );
	EXPECT_EQ( out.embedding.value().row( 1 ), out.embedding.value().row( 3 ) );
	const Eigen::RowVectorXd a = out.embedding.value().row( 0 ), b = out.embedding.value().row( 4 );
	EXPECT_LE( std::fabs( cosine_similarity( { a.data(), 32 }, { b.data(), 32 } ) ), 1.0 + 1e-12 );
	EXPECT_THROW( head.forward( ag::constant<double>( ag::Matrix<double>::Zero( 2, 9 ) ), false ), ArgumentError );
	EXPECT_THROW( ProjectionHead<double>( { 0, 1, 1, 1 }, store, rng, "bad." ), ArgumentError );
}

TEST( ContrastiveGradient, EmbeddingsAndCombinedLoss )
{
	for( std::uint64_t seed = 1; seed <= 10; ++seed ) {
		const auto r = gradcheck::contrastive( seed );
		ASSERT_GT( r.checked, 0u );
		EXPECT_LT( r.max_rel, 1e-5 ) << "seed " << seed;
	}
}

TEST( ContrastiveGradient, ProjectionHeadWeights )
{
	for( std::uint64_t seed = 1; seed <= 5; ++seed ) {
		const auto r = gradcheck::projection_head( seed );
		ASSERT_GT( r.checked, 0u );
		EXPECT_LT( r.max_rel, 1e-5 ) << "seed " << seed;
	}
}
