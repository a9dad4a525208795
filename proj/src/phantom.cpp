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

#include "provit/phantom.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <random>

#include "provit/error.hpp"
#include "provit/nifti.hpp"

namespace provit {

namespace {

// Largest normalized gland radius over a dense sampling of the lesion surface.
double max_radius_on_surface( const Ellipsoid& lesion, const Ellipsoid& gland, Spacing sp )
{
	constexpr int kTheta = 48;
	constexpr int kPhi = 96;
	double worst = gland.radius( lesion.center[0], lesion.center[1], lesion.center[2], sp );
	for( int i = 0; i <= kTheta; ++i ) {
		const double theta = std::numbers::pi * i / kTheta;
		for( int j = 0; j < kPhi; ++j ) {
			const double phi = 2 * std::numbers::pi * j / kPhi;
			const double z = lesion.center[0] + lesion.semi_axes_mm[0] * std::cos( theta ) / sp.dz;
			const double y = lesion.center[1] + lesion.semi_axes_mm[1] * std::sin( theta ) * std::cos( phi ) / sp.dy;
			const double x = lesion.center[2] + lesion.semi_axes_mm[2] * std::sin( theta ) * std::sin( phi ) / sp.dx;
			worst = std::max( worst, gland.radius( z, y, x, sp ) );
		}
	}
	return worst;
}

std::vector<double> gaussian_kernel( double sigmaVoxels )
{
	if( sigmaVoxels < 1e-3 ) {
		return { 1.0 };
	}
	const int half = std::max( 1, static_cast<int>( std::ceil( 3 * sigmaVoxels ) ) );
	std::vector<double> k( 2 * half + 1 );
	double sum = 0;
	for( int i = -half; i <= half; ++i ) {
		k[i + half] = std::exp( -0.5 * i * i / ( sigmaVoxels * sigmaVoxels ) );
		sum += k[i + half];
	}
	for( double& v : k ) {
		v /= sum;
	}
	return k;
}

// Separable convolution along one axis of a (outer, n, inner) buffer, edge-clamped.
void smooth_axis( std::vector<double>& data, std::size_t outer, std::size_t n, std::size_t inner, const std::vector<double>& k )
{
	if( k.size() == 1 ) {
		return;
	}
	const int half = static_cast<int>( k.size() / 2 );
	std::vector<double> line( n );
	for( std::size_t o = 0; o < outer; ++o ) {
		for( std::size_t i = 0; i < inner; ++i ) {
			for( std::size_t t = 0; t < n; ++t ) {
				line[t] = data[( o * n + t ) * inner + i];
			}
			for( std::size_t t = 0; t < n; ++t ) {
				double acc = 0;
				for( int d = -half; d <= half; ++d ) {
					const auto s = std::clamp<std::ptrdiff_t>( static_cast<std::ptrdiff_t>( t ) + d, 0, static_cast<std::ptrdiff_t>( n ) - 1 );
					acc += k[d + half] * line[s];
				}
				data[( o * n + t ) * inner + i] = acc;
			}
		}
	}
}

double uniform( std::mt19937_64& rng, double lo, double hi )
{
	return std::uniform_real_distribution<double>( lo, hi )( rng );
}

} // namespace

double Ellipsoid::radius( double z, double y, double x, Spacing sp ) const
{
	const double dz = ( z - center[0] ) * sp.dz / semi_axes_mm[0];
	const double dy = ( y - center[1] ) * sp.dy / semi_axes_mm[1];
	const double dx = ( x - center[2] ) * sp.dx / semi_axes_mm[2];
	return std::sqrt( dz * dz + dy * dy + dx * dx );
}

double Ellipsoid::volume_mm3() const
{
	return 4.0 / 3.0 * std::numbers::pi * semi_axes_mm[0] * semi_axes_mm[1] * semi_axes_mm[2];
}

std::map<SequenceTag, SequenceContrast> PhantomSpec::default_contrast()
{
	// ADC: csPCa darker than gland. DWI: csPCa brighter than gland.
	return {
		{ SequenceTag::T2, { 0.2, 1.0, 0.8, 0.55, 0.08 } },
		{ SequenceTag::ADC, { 0.1, 1.0, 0.8, 0.45, 0.08 } },
		{ SequenceTag::DWI, { 0.1, 0.5, 0.65, 1.0, 0.08 } },
	};
}

void PhantomSpec::validate() const
{
	if( !spacing.valid() || shape.size() == 0 ) {
		throw ArgumentError( "phantom: invalid grid" );
	}
	auto checkAxes = []( const Ellipsoid& e ) {
		for( double a : e.semi_axes_mm ) {
			if( !( a > 0 ) ) {
				throw ArgumentError( "phantom: ellipsoid semi-axes must be positive" );
			}
		}
	};
	checkAxes( gland );
	for( std::size_t i = 0; i < lesions.size(); ++i ) {
		const PhantomLesion& l = lesions[i];
		checkAxes( l.shape );
		if( l.cspca ? ( l.gg < 2 || l.gg > 5 ) : l.gg != 1 ) {
			throw ArgumentError( "phantom: lesion " + std::to_string( i ) + " grade group inconsistent with its class" );
		}
		if( max_radius_on_surface( l.shape, gland, spacing ) > 1.0 ) {
			throw ArgumentError( "phantom: lesion " + std::to_string( i ) + " extends outside the gland" );
		}
	}
	for( const auto& [tag, c] : contrast ) {
		if( !( c.noise_sigma >= 0 ) ) {
			throw ArgumentError( std::string( "phantom: negative noise sigma for " ) + sequence_name( tag ) );
		}
	}
	if( !( smoothing_fwhm_mm >= 0 ) ) {
		throw ArgumentError( "phantom: negative smoothing FWHM" );
	}
}

double phantom_psa( double base, double perMl, double lesionMl, double noise, double standardNormal )
{
	return std::max( 0.1, base + perMl * lesionMl + noise * standardNormal );
}

PhantomCase generate_case( const PhantomSpec& spec, const std::string& caseId )
{
	spec.validate();
	const Shape3 s = spec.shape;
	PhantomCase out;
	out.labels = LabelVolume( s, spec.spacing, kBackground );

	// Label geometry: gland first, lesions only where the gland is.
	std::vector<std::size_t> lesionVoxels( spec.lesions.size(), 0 );
	for( std::size_t z = 0; z < s.nz; ++z ) {
		for( std::size_t y = 0; y < s.ny; ++y ) {
			for( std::size_t x = 0; x < s.nx; ++x ) {
				const double zz = static_cast<double>( z ), yy = static_cast<double>( y ), xx = static_cast<double>( x );
				if( spec.gland.radius( zz, yy, xx, spec.spacing ) > 1.0 ) {
					continue;
				}
				std::uint8_t label = kGland;
				for( std::size_t i = 0; i < spec.lesions.size(); ++i ) {
					const PhantomLesion& l = spec.lesions[i];
					if( l.shape.radius( zz, yy, xx, spec.spacing ) <= 1.0 ) {
						label = std::max<std::uint8_t>( label, l.cspca ? kCsPCa : kIndolent );
						++lesionVoxels[i];
					}
				}
				out.labels.at( z, y, x ) = label;
			}
		}
	}

	int maxGg = 0;
	double lesionMl = 0;
	for( std::size_t i = 0; i < spec.lesions.size(); ++i ) {
		lesionMl += spec.lesions[i].shape.volume_mm3() / 1000.0;
		if( lesionVoxels[i] > 0 ) {
			maxGg = std::max( maxGg, spec.lesions[i].gg );
		}
	}

	std::mt19937_64 rng( spec.seed );
	std::normal_distribution<double> normal( 0.0, 1.0 );
	const double fwhmToSigma = 1.0 / ( 2.0 * std::sqrt( 2.0 * std::numbers::ln2 ) );
	const double sigmaMm = spec.smoothing_fwhm_mm * fwhmToSigma;
	const auto kz = gaussian_kernel( sigmaMm / spec.spacing.dz );
	const auto ky = gaussian_kernel( sigmaMm / spec.spacing.dy );
	const auto kx = gaussian_kernel( sigmaMm / spec.spacing.dx );

	for( const auto& [tag, c] : spec.contrast ) {
		std::vector<double> image( s.size() );
		for( std::size_t i = 0; i < s.size(); ++i ) {
			switch( out.labels.data[i] ) {
				case kBackground:
					image[i] = c.background_mean;
					break;
				case kGland:
					image[i] = c.gland_mean;
					break;
				case kIndolent:
					image[i] = c.indolent_mean;
					break;
				default:
					image[i] = c.cspca_mean;
					break;
			}
		}
		smooth_axis( image, s.nz * s.ny, s.nx, 1, kx );
		smooth_axis( image, s.nz, s.ny, s.nx, ky );
		smooth_axis( image, 1, s.nz, s.ny * s.nx, kz );
		Volume v( s, spec.spacing );
		v.sequence = tag;
		for( std::size_t i = 0; i < s.size(); ++i ) {
			v.data[i] = static_cast<float>( image[i] + c.noise_sigma * normal( rng ) );
		}
		out.volumes.emplace( tag, std::move( v ) );
	}

	out.lesion_volume_ml = lesionMl;
	out.record.case_id = caseId;
	out.record.max_gg = maxGg;
	out.record.psa = phantom_psa( spec.psa_base, spec.psa_per_ml, lesionMl, spec.psa_noise, normal( rng ) );
	return out;
}

std::uint64_t derive_seed( std::uint64_t master, std::uint64_t index )
{
	// splitmix64 finalizer over the combined key.
	std::uint64_t z = master + 0x9E3779B97F4A7C15ull * ( index + 1 );
	z = ( z ^ ( z >> 30 ) ) * 0xBF58476D1CE4E5B9ull;
	z = ( z ^ ( z >> 27 ) ) * 0x94D049BB133111EBull;
	return z ^ ( z >> 31 );
}

std::array<std::size_t, 3> cohort_counts( std::size_t n, const CohortProfile& profile )
{
	const std::array<double, 3> f = { profile.cspca_fraction, profile.indolent_fraction, profile.negative_fraction };
	const double total = f[0] + f[1] + f[2];
	if( !( total > 0 ) || f[0] < 0 || f[1] < 0 || f[2] < 0 ) {
		throw ArgumentError( "cohort profile fractions must be non-negative and not all zero" );
	}
	std::array<std::size_t, 3> counts{};
	std::array<double, 3> remainder{};
	std::size_t assigned = 0;
	for( int i = 0; i < 3; ++i ) {
		const double exact = static_cast<double>( n ) * f[i] / total;
		counts[i] = static_cast<std::size_t>( std::floor( exact + 1e-9 ) );
		remainder[i] = exact - static_cast<double>( counts[i] );
		assigned += counts[i];
	}
	while( assigned < n ) {
		int best = 0;
		for( int i = 1; i < 3; ++i ) {
			if( remainder[i] > remainder[best] + 1e-12 ) {
				best = i;
			}
		}
		++counts[best];
		remainder[best] = -1;
		++assigned;
	}
	return counts;
}

PhantomSpec random_phantom_spec( std::uint64_t seed, CaseKind kind, const CohortProfile& profile )
{
	std::mt19937_64 rng( seed );
	PhantomSpec spec;
	spec.seed = derive_seed( seed, 0xC0FFEE );
	spec.shape = profile.shape;
	spec.spacing = profile.spacing;
	const Shape3 s = spec.shape;
	const Spacing sp = spec.spacing;

	auto jitter = [&]( std::size_t n, double mm, double d ) { return 0.5 * static_cast<double>( n - 1 ) + uniform( rng, -mm, mm ) / d; };
	spec.gland.center = { jitter( s.nz, 1.5, sp.dz ), jitter( s.ny, 4.0, sp.dy ), jitter( s.nx, 4.0, sp.dx ) };
	spec.gland.semi_axes_mm = { uniform( rng, 12.0, 16.0 ), uniform( rng, 16.0, 21.0 ), uniform( rng, 19.0, 25.0 ) };
	// Keep the gland inside the grid.
	for( int a = 0; a < 3; ++a ) {
		const double d = a == 0 ? sp.dz : ( a == 1 ? sp.dy : sp.dx );
		const double n = static_cast<double>( a == 0 ? s.nz : ( a == 1 ? s.ny : s.nx ) );
		const double maxSemi = std::min( spec.gland.center[a], n - 1 - spec.gland.center[a] ) * d;
		spec.gland.semi_axes_mm[a] = std::min( spec.gland.semi_axes_mm[a], std::max( maxSemi, d ) );
	}

	auto place = [&]( bool cspca ) {
		for( int attempt = 0; attempt < 400; ++attempt ) {
			const double shrink = attempt < 200 ? 1.0 : 0.7;
			PhantomLesion l;
			l.cspca = cspca;
			l.gg = cspca ? static_cast<int>( std::uniform_int_distribution<int>( 2, 5 )( rng ) ) : 1;
			l.shape.semi_axes_mm = { shrink * uniform( rng, 4.5, 7.5 ), shrink * uniform( rng, 6.0, 9.5 ), shrink * uniform( rng, 6.0, 9.5 ) };
			for( int a = 0; a < 3; ++a ) {
				const double d = a == 0 ? sp.dz : ( a == 1 ? sp.dy : sp.dx );
				const double room = std::max( 0.0, spec.gland.semi_axes_mm[a] - l.shape.semi_axes_mm[a] );
				l.shape.center[a] = spec.gland.center[a] + uniform( rng, -room, room ) / d;
			}
			if( max_radius_on_surface( l.shape, spec.gland, sp ) <= 0.97 ) {
				spec.lesions.push_back( l );
				return;
			}
		}
		throw ArgumentError( "phantom: could not place a lesion inside the gland" );
	};

	const double scale = profile.contrast_scale;
	for( auto& [tag, c] : spec.contrast ) {
		c.indolent_mean = c.gland_mean + scale * ( c.indolent_mean - c.gland_mean );
		c.cspca_mean = c.gland_mean + scale * ( c.cspca_mean - c.gland_mean );
		c.noise_sigma = profile.noise_sigma;
	}

	switch( kind ) {
		case CaseKind::CsPCa: {
			place( true );
			if( uniform( rng, 0, 1 ) < 0.35 ) {
				place( uniform( rng, 0, 1 ) < 0.5 );
			}
			break;
		}
		case CaseKind::Indolent:
			place( false );
			break;
		case CaseKind::Negative:
			break;
	}
	return spec;
}

Cohort plan_cohort( std::size_t n, std::uint64_t seed, const CohortProfile& profile )
{
	if( n == 0 ) {
		throw ArgumentError( "cohort size must be >= 1" );
	}
	const auto counts = cohort_counts( n, profile );
	Cohort cohort;
	for( std::size_t i = 0; i < counts[0]; ++i ) {
		cohort.kinds.push_back( CaseKind::CsPCa );
	}
	for( std::size_t i = 0; i < counts[1]; ++i ) {
		cohort.kinds.push_back( CaseKind::Indolent );
	}
	for( std::size_t i = 0; i < counts[2]; ++i ) {
		cohort.kinds.push_back( CaseKind::Negative );
	}
	std::mt19937_64 rng( derive_seed( seed, 0xFEED ) );
	std::shuffle( cohort.kinds.begin(), cohort.kinds.end(), rng );
	for( std::size_t i = 0; i < n; ++i ) {
		char id[32];
		std::snprintf( id, sizeof( id ), "case%04zu", i );
		cohort.case_ids.emplace_back( id );
		cohort.specs.push_back( random_phantom_spec( derive_seed( seed, i ), cohort.kinds[i], profile ) );
	}
	return cohort;
}

Manifest write_cohort( const Cohort& cohort, const std::filesystem::path& outDir )
{
	std::filesystem::create_directories( outDir );
	Manifest manifest;
	manifest.root = outDir;
	for( std::size_t i = 0; i < cohort.specs.size(); ++i ) {
		PhantomCase c = generate_case( cohort.specs[i], cohort.case_ids[i] );
		const std::string& id = cohort.case_ids[i];
		for( const auto& [tag, volume] : c.volumes ) {
			const std::string file = id + "_" + sequence_name( tag ) + ".nii.gz";
			write_nifti( volume, outDir / file );
			c.record.sequence_paths[sequence_name( tag )] = file;
		}
		c.record.label_path = id + "_label.nii.gz";
		write_nifti( c.labels, outDir / c.record.label_path );
		manifest.cases.push_back( c.record );
	}
	write_manifest( manifest, outDir / "manifest.json" );
	return manifest;
}

} // namespace provit
