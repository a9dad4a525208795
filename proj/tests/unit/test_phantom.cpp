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
#include <numbers>
#include <set>

#include <gtest/gtest.h>

#include "provit/error.hpp"
#include "provit/phantom.hpp"

using namespace provit;

namespace {

PhantomSpec base_spec( std::uint64_t seed )
{
	PhantomSpec s;
	s.seed = seed;
	s.shape = { 16, 128, 128 };
	s.spacing = { 3.0, 0.5, 0.5 };
	s.gland.center = { 7.5, 63.5, 63.5 };
	s.gland.semi_axes_mm = { 15.0, 20.0, 20.0 };
	return s;
}

PhantomLesion lesion( std::array<double, 3> center, double radiusMm, bool cspca )
{
	PhantomLesion l;
	l.shape.center = center;
	l.shape.semi_axes_mm = { std::max( radiusMm, 3.5 ), radiusMm, radiusMm };
	l.cspca = cspca;
	l.gg = cspca ? 3 : 1;
	return l;
}

std::size_t count_label( const LabelVolume& l, std::uint8_t lo )
{
	std::size_t n = 0;
	for( auto v : l.data ) n += v >= lo ? 1 : 0;
	return n;
}

double mean_where( const Volume& v, const LabelVolume& l, std::uint8_t label )
{
	double s = 0;
	std::size_t n = 0;
	for( std::size_t i = 0; i < v.data.size(); ++i ) {
		if( l.data[i] == label ) {
			s += v.data[i];
			++n;
		}
	}
	return s / static_cast<double>( n );
}

} // namespace

TEST( Phantom, NoLesionsMeansOnlyGland )
{
	const PhantomCase c = generate_case( base_spec( 3 ) );
	std::set<int> labels( c.labels.data.begin(), c.labels.data.end() );
	EXPECT_EQ( labels, ( std::set<int>{ 0, 1 } ) );
	EXPECT_EQ( c.record.max_gg, 0 );
}

TEST( Phantom, SameSeedIsBitIdentical )
{
	PhantomSpec s = base_spec( 11 );
	s.lesions.push_back( lesion( { 7.5, 60.0, 70.0 }, 5.0, true ) );
	const PhantomCase a = generate_case( s ), b = generate_case( s );
	for( const auto& [tag, v] : a.volumes ) {
		EXPECT_EQ( 0, std::memcmp( v.data.data(), b.volumes.at( tag ).data.data(), v.data.size() * sizeof( float ) ) );
	}
	EXPECT_EQ( a.labels.data, b.labels.data );
	EXPECT_EQ( a.record.psa, b.record.psa );
}

TEST( Phantom, GlandVoxelCountMatchesEllipsoidVolume )
{
	const PhantomCase c = generate_case( base_spec( 1 ) );
	const double analytic = 4.0 / 3.0 * std::numbers::pi * 15.0 * 20.0 * 20.0 / ( 3.0 * 0.5 * 0.5 );
	const double counted = static_cast<double>( count_label( c.labels, kGland ) );
	EXPECT_LT( std::fabs( counted - analytic ) / analytic, 0.05 );
}

TEST( Phantom, LesionsInsideGlandWithExpectedContrast )
{
	PhantomSpec s = base_spec( 5 );
	s.lesions.push_back( lesion( { 7.5, 55.0, 58.0 }, 6.0, true ) );
	s.lesions.push_back( lesion( { 7.5, 75.0, 72.0 }, 4.0, false ) );
	const PhantomCase c = generate_case( s );
	std::size_t cancerOutside = 0;
	for( std::size_t z = 0; z < c.labels.shape.nz; ++z )
		for( std::size_t y = 0; y < c.labels.shape.ny; ++y )
			for( std::size_t x = 0; x < c.labels.shape.nx; ++x )
				if( c.labels.at( z, y, x ) >= kIndolent && s.gland.radius( double( z ), double( y ), double( x ), s.spacing ) > 1.0 )
					++cancerOutside;
	EXPECT_EQ( cancerOutside, 0u );
	EXPECT_GE( c.record.max_gg, 2 );

	const Volume& adc = c.volumes.at( SequenceTag::ADC );
	const Volume& dwi = c.volumes.at( SequenceTag::DWI );
	EXPECT_LT( mean_where( adc, c.labels, kCsPCa ), mean_where( adc, c.labels, kGland ) );
	EXPECT_GT( mean_where( dwi, c.labels, kCsPCa ), mean_where( dwi, c.labels, kGland ) );
	// Detectability floor: means separated by at least one noise sigma.
	const double sigma = s.contrast.at( SequenceTag::ADC ).noise_sigma;
	EXPECT_GE( mean_where( adc, c.labels, kGland ) - mean_where( adc, c.labels, kCsPCa ), sigma );
}

TEST( Phantom, LesionOutsideGlandRejected )
{
	PhantomSpec s = base_spec( 2 );
	s.lesions.push_back( lesion( { 7.5, 63.5, 100.0 }, 6.0, true ) );
	EXPECT_THROW( generate_case( s ), ArgumentError );
}

TEST( Phantom, PsaMonotoneInLesionVolume )
{
	double prev = -1;
	for( double ml = 0; ml <= 5.0; ml += 0.25 ) {
		const double p = phantom_psa( 3.0, 1.5, ml, 1.0, -0.7 );
		EXPECT_GE( p, prev );
		prev = p;
	}
	EXPECT_EQ( phantom_psa( 0.0, 1.0, 0.0, 1.0, -5.0 ), 0.1 );
}

TEST( Cohort, ProfileFractionsRoundDeterministically )
{
	CohortProfile p;
	p.cspca_fraction = 0.4;
	p.indolent_fraction = 0.2;
	p.negative_fraction = 0.4;
	const auto counts = cohort_counts( 10, p );
	EXPECT_EQ( counts, ( std::array<std::size_t, 3>{ 4, 2, 4 } ) );
	const Cohort c = plan_cohort( 10, 7, p );
	ASSERT_EQ( c.kinds.size(), 10u );
	EXPECT_EQ( std::count( c.kinds.begin(), c.kinds.end(), CaseKind::CsPCa ), 4 );
	EXPECT_EQ( std::count( c.kinds.begin(), c.kinds.end(), CaseKind::Indolent ), 2 );
}

TEST( Cohort, SeedsChangePlacementsAndNegativeProfileHasNoGrade )
{
	CohortProfile p;
	const Cohort a = plan_cohort( 4, 1, p ), b = plan_cohort( 4, 2, p );
	bool differ = false;
	for( std::size_t i = 0; i < 4; ++i ) {
		differ |= a.specs[i].gland.semi_axes_mm != b.specs[i].gland.semi_axes_mm;
	}
	EXPECT_TRUE( differ );

	CohortProfile neg;
	neg.cspca_fraction = 0;
	neg.indolent_fraction = 0;
	neg.negative_fraction = 1;
	neg.shape = { 8, 96, 96 };
	const Cohort n = plan_cohort( 1, 3, neg );
	ASSERT_EQ( n.specs.size(), 1u );
	const PhantomCase c = generate_case( n.specs[0], n.case_ids[0] );
	EXPECT_EQ( c.record.max_gg, 0 );
}

TEST( Cohort, DerivedSeedsAreStableAndDistinct )
{
	EXPECT_EQ( derive_seed( 5, 1 ), derive_seed( 5, 1 ) );
	EXPECT_NE( derive_seed( 5, 1 ), derive_seed( 5, 2 ) );
	EXPECT_NE( derive_seed( 5, 1 ), derive_seed( 6, 1 ) );
}
