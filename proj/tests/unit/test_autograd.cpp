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
#include <functional>
#include <numbers>
#include <random>

#include <gtest/gtest.h>

#include "gradcheck.hpp"
#include "oracles.hpp"
#include "provit/autograd.hpp"
#include "provit/error.hpp"

using namespace provit;
using M = ag::Matrix<double>;
using V = ag::Var<double>;

namespace {

// Weighted sum <R, out> so every output entry feeds the scalar with its own weight.
V weighted_sum( const V& out, const M& r )
{
	const double value = ( out.value().array() * r.array() ).sum();
	return ag::custom_op<double>( M::Constant( 1, 1, value ), { out }, [out, r]( const M& g ) { out.node()->accumulate( g( 0, 0 ) * r ); } );
}

// Checks every input entry of `op` against central differences; returns the worst relative error.
double check_op( std::vector<M> inputs, const std::function<V( const std::vector<V>& )>& op, std::uint64_t seed = 3 )
{
	std::mt19937_64 rng( seed );
	std::vector<V> leaves;
	for( const auto& m : inputs ) leaves.push_back( ag::leaf<double>( m ) );
	const V probe = [&] {
		ag::NoGradGuard guard;
		return op( leaves );
	}();
	const M r = gradcheck::random_matrix( rng, probe.rows(), probe.cols() );
	ag::backward( weighted_sum( op( leaves ), r ) );

	double worst = 0.0;
	for( std::size_t k = 0; k < inputs.size(); ++k ) {
		for( Eigen::Index i = 0; i < inputs[k].rows(); ++i ) {
			for( Eigen::Index j = 0; j < inputs[k].cols(); ++j ) {
				const double numeric = oracle::central_difference( inputs[k], i, j, gradcheck::kStep, [&] {
					ag::NoGradGuard guard;
					std::vector<V> c;
					for( const auto& m : inputs ) c.push_back( ag::constant<double>( m ) );
					return ( op( c ).value().array() * r.array() ).sum();
				} );
				const double analytic = leaves[k].grad().size() ? leaves[k].grad()( i, j ) : 0.0;
				worst = std::max( worst, oracle::relative_error( analytic, numeric, gradcheck::kFloor ) );
			}
		}
	}
	return worst;
}

M rnd( std::uint64_t seed, Eigen::Index r, Eigen::Index c, double sd = 1.0 )
{
	std::mt19937_64 rng( seed );
	return gradcheck::random_matrix( rng, r, c, sd );
}

constexpr double kTol = 1e-6;

} // namespace

TEST( AutogradGradients, LinearAlgebra )
{
	EXPECT_LT( check_op( { rnd( 1, 4, 3 ), rnd( 2, 3, 5 ) }, []( auto& v ) { return ag::matmul( v[0], v[1] ); } ), kTol );
	EXPECT_LT( check_op( { rnd( 1, 4, 3 ), rnd( 2, 5, 3 ) }, []( auto& v ) { return ag::matmul_nt( v[0], v[1] ); } ), kTol );
	EXPECT_LT( check_op( { rnd( 1, 4, 3 ), rnd( 2, 4, 3 ) }, []( auto& v ) { return ag::sub( ag::add( v[0], v[1] ), ag::scale( v[1], 3.0 ) ); } ), kTol );
	EXPECT_LT( check_op( { rnd( 1, 4, 3 ), rnd( 2, 1, 3 ) }, []( auto& v ) { return ag::add_row( v[0], v[1] ); } ), kTol );
	EXPECT_LT( check_op( { rnd( 1, 4, 3 ), rnd( 2, 3, 2 ), rnd( 3, 1, 2 ) }, []( auto& v ) { return ag::linear( v[0], v[1], v[2] ); } ), kTol );
}

TEST( AutogradGradients, Pointwise )
{
	EXPECT_LT( check_op( { rnd( 1, 5, 4, 2.0 ) }, []( auto& v ) { return ag::gelu( v[0] ); } ), kTol );
	EXPECT_LT( check_op( { rnd( 1, 5, 4, 2.0 ) }, []( auto& v ) { return ag::softmax_rows( v[0] ); } ), kTol );
	EXPECT_LT( check_op( { rnd( 1, 5, 4 ) }, []( auto& v ) { return ag::l2_normalize_rows( v[0] ); } ), kTol );
	EXPECT_LT( check_op( { rnd( 1, 5, 6 ), rnd( 2, 1, 6 ), rnd( 3, 1, 6 ) }, []( auto& v ) { return ag::layer_norm( v[0], v[1], v[2] ); } ), kTol );
}

TEST( AutogradGradients, AttentionAndNormalization )
{
	EXPECT_LT( check_op( { rnd( 1, 5, 8 ), rnd( 2, 5, 8 ), rnd( 3, 5, 8 ) }, []( auto& v ) { return ag::attention( v[0], v[1], v[2], 2 ); } ), kTol );
	EXPECT_LT( check_op( { rnd( 1, 6, 4 ), rnd( 2, 1, 4 ), rnd( 3, 1, 4 ) },
				   []( auto& v ) {
					   ag::BatchNormState<double> st;
					   return ag::batch_norm( v[0], v[1], v[2], st, true );
				   } ),
		kTol );
	EXPECT_LT( check_op( { rnd( 1, 5, 4 ), rnd( 2, 3, 4 ), M::Constant( 1, 3, 1.5 ) }, []( auto& v ) { return ag::weight_norm_linear( v[0], v[1], v[2] ); } ), kTol );
}

TEST( AutogradGradients, Reshaping )
{
	const std::vector<int> idx{ 2, 0, 2, 3 };
	EXPECT_LT( check_op( { rnd( 1, 5, 3 ) }, [&]( auto& v ) { return ag::gather_rows<double>( v[0], idx ); } ), kTol );
	EXPECT_LT( check_op( { rnd( 1, 5, 3 ) }, []( auto& v ) { return ag::slice_rows( v[0], 1, 3 ); } ), kTol );
	EXPECT_LT( check_op( { rnd( 1, 5, 3 ), rnd( 2, 5, 2 ) }, []( auto& v ) { return ag::concat_cols<double>( { v[0], v[1] } ); } ), kTol );
	EXPECT_LT( check_op( { rnd( 1, 5, 3 ) }, []( auto& v ) { return ag::sum_all( v[0] ); } ), kTol );
	EXPECT_LT( check_op( { rnd( 1, 1, 1 ), rnd( 2, 1, 1 ) }, []( auto& v ) { return ag::add_scalars<double>( { v[0], v[1] }, { 0.3, -2.0 } ); } ), kTol );
}

TEST( AutogradGradients, ImageOps )
{
	EXPECT_LT( check_op( { rnd( 1, 4, 2 * 2 * 3 ) }, []( auto& v ) { return ag::tokens_to_image( v[0], 2, 2, 3 ); } ), kTol );
	EXPECT_LT( check_op( { rnd( 1, 3 * 4, 2 ) }, []( auto& v ) { return ag::upsample2x( v[0], 3, 4 ); } ), kTol );
	EXPECT_LT( check_op( { rnd( 1, 4 * 5, 2 ), rnd( 2, 18, 3 ), rnd( 3, 1, 3 ) }, []( auto& v ) { return ag::conv3x3( v[0], 4, 5, v[1], v[2] ); } ), kTol );
}

TEST( AutogradValues, GeluAndSoftmax )
{
	ag::NoGradGuard guard;
	const M x = ( M( 1, 3 ) << -1.0, 0.0, 2.0 ).finished();
	const M g = ag::gelu( ag::constant<double>( x ) ).value();
	for( int j = 0; j < 3; ++j ) EXPECT_NEAR( g( 0, j ), 0.5 * x( 0, j ) * ( 1 + std::erf( x( 0, j ) / std::numbers::sqrt2 ) ), 1e-15 );
	const M s = ag::softmax_rows( ag::constant<double>( rnd( 4, 6, 5, 30.0 ) ) ).value();
	for( Eigen::Index i = 0; i < s.rows(); ++i ) {
		EXPECT_NEAR( s.row( i ).sum(), 1.0, 1e-14 );
		EXPECT_TRUE( ( s.row( i ).array() >= 0 ).all() );
	}
}

TEST( AutogradValues, AttentionMatchesDirectFormula )
{
	ag::NoGradGuard guard;
	const M q = rnd( 1, 4, 6 ), k = rnd( 2, 4, 6 ), v = rnd( 3, 4, 6 );
	const M out = ag::attention( ag::constant<double>( q ), ag::constant<double>( k ), ag::constant<double>( v ), 2 ).value();
	for( int h = 0; h < 2; ++h ) {
		M logits = q.middleCols( 3 * h, 3 ) * k.middleCols( 3 * h, 3 ).transpose() / std::sqrt( 3.0 );
		for( Eigen::Index i = 0; i < 4; ++i ) {
			const double mx = logits.row( i ).maxCoeff();
			logits.row( i ) = ( logits.row( i ).array() - mx ).exp().matrix();
			logits.row( i ) /= logits.row( i ).sum();
		}
		EXPECT_LT( ( out.middleCols( 3 * h, 3 ) - logits * v.middleCols( 3 * h, 3 ) ).cwiseAbs().maxCoeff(), 1e-13 );
	}
	EXPECT_THROW( ag::attention( ag::constant<double>( q ), ag::constant<double>( k ), ag::constant<double>( v ), 4 ), ArgumentError );
}

TEST( AutogradValues, ConvMatchesNaiveLoop )
{
	ag::NoGradGuard guard;
	const int h = 4, w = 5, cin = 2, cout = 3;
	const M x = rnd( 1, h * w, cin ), wt = rnd( 2, 9 * cin, cout ), b = rnd( 3, 1, cout );
	const M out = ag::conv3x3( ag::constant<double>( x ), h, w, ag::constant<double>( wt ), ag::constant<double>( b ) ).value();
	for( int y = 0; y < h; ++y ) {
		for( int xx = 0; xx < w; ++xx ) {
			for( int o = 0; o < cout; ++o ) {
				double acc = b( 0, o );
				for( int ky = 0; ky < 3; ++ky ) {
					for( int kx = 0; kx < 3; ++kx ) {
						const int sy = y + ky - 1, sx = xx + kx - 1;
						if( sy < 0 || sx < 0 || sy >= h || sx >= w ) continue;
						for( int c = 0; c < cin; ++c ) acc += x( sy * w + sx, c ) * wt( ( ky * 3 + kx ) * cin + c, o );
					}
				}
				EXPECT_NEAR( out( y * w + xx, o ), acc, 1e-13 );
			}
		}
	}
}

TEST( AutogradValues, UpsamplePreservesConstantsAndRamps )
{
	ag::NoGradGuard guard;
	const M c = M::Constant( 12, 1, 2.5 );
	EXPECT_LT( ( ag::upsample2x( ag::constant<double>( c ), 3, 4 ).value().array() - 2.5 ).abs().maxCoeff(), 1e-15 );
	// A horizontal ramp stays linear between the half-pixel centers.
	M ramp( 4, 1 );
	ramp << 0, 1, 2, 3;
	const M up = ag::upsample2x( ag::constant<double>( ramp ), 1, 4 ).value();
	ASSERT_EQ( up.rows(), 16 );
	EXPECT_NEAR( up( 0, 0 ), 0.0, 1e-15 );
	EXPECT_NEAR( up( 1, 0 ), 0.25, 1e-15 );
	EXPECT_NEAR( up( 2, 0 ), 0.75, 1e-15 );
	EXPECT_NEAR( up( 7, 0 ), 3.0, 1e-15 );
}

TEST( AutogradValues, BatchNormRunningStatistics )
{
	ag::BatchNormState<double> st;
	const M x = ( M( 4, 1 ) << 1, 2, 3, 6 ).finished();
	const V one = ag::constant<double>( M::Ones( 1, 1 ) ), zero = ag::constant<double>( M::Zero( 1, 1 ) );
	const M y = ag::batch_norm( ag::constant<double>( x ), one, zero, st, true ).value();
	// Mean 3, biased variance 3.5, unbiased 14/3.
	EXPECT_NEAR( y( 3, 0 ), 3.0 / std::sqrt( 3.5 + 1e-5 ), 1e-12 );
	EXPECT_NEAR( st.running_mean( 0, 0 ), 0.3, 1e-15 );
	EXPECT_NEAR( st.running_var( 0, 0 ), 0.9 + 0.1 * 14.0 / 3.0, 1e-15 );
	const M e = ag::batch_norm( ag::constant<double>( x ), one, zero, st, false ).value();
	EXPECT_NEAR( e( 0, 0 ), ( 1.0 - 0.3 ) / std::sqrt( st.running_var( 0, 0 ) + 1e-5 ), 1e-12 );
}

TEST( Autograd, GradientsAccumulateAndNoGradSkipsRecording )
{
	V a = ag::leaf<double>( M::Constant( 1, 1, 2.0 ) );
	ag::backward( ag::scale( a, 3.0 ) );
	ag::backward( ag::scale( a, 3.0 ) );
	EXPECT_DOUBLE_EQ( a.grad()( 0, 0 ), 6.0 );
	{
		ag::NoGradGuard guard;
		EXPECT_FALSE( ag::grad_enabled() );
		EXPECT_FALSE( ag::scale( a, 3.0 ).requires_grad() );
	}
	EXPECT_TRUE( ag::grad_enabled() );
	// A value reused twice receives both contributions.
	V b = ag::leaf<double>( M::Constant( 1, 1, 1.0 ) );
	ag::backward( ag::add( b, b ) );
	EXPECT_DOUBLE_EQ( b.grad()( 0, 0 ), 2.0 );
}

TEST( Autograd, ShapeErrors )
{
	EXPECT_THROW( ag::matmul( ag::constant<double>( M::Zero( 2, 3 ) ), ag::constant<double>( M::Zero( 2, 3 ) ) ), ArgumentError );
	EXPECT_THROW( ag::conv3x3( ag::constant<double>( M::Zero( 6, 2 ) ), 2, 3, ag::constant<double>( M::Zero( 9, 1 ) ),
					  ag::constant<double>( M::Zero( 1, 1 ) ) ),
		ArgumentError );
}
