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

#include "provit/preprocess.hpp"

#include <algorithm>
#include <cmath>

#include "provit/error.hpp"

namespace provit {

namespace {

std::size_t output_extent( std::size_t n, double dIn, double dOut )
{
	const double extent = std::round( static_cast<double>( n ) * dIn / dOut );
	return std::max<std::size_t>( 1, static_cast<std::size_t>( extent ) );
}

// Continuous input index sampled by output voxel j.
double source_coordinate( std::size_t j, std::size_t nIn, double dIn, std::size_t nOut, double dOut )
{
	const double center = 0.5 * static_cast<double>( nIn ) * dIn;
	const double phys = center + ( static_cast<double>( j ) + 0.5 - 0.5 * static_cast<double>( nOut ) ) * dOut;
	return phys / dIn - 0.5;
}

struct Tap {
	std::size_t lo = 0;
	std::size_t hi = 0;
	double w = 0; // weight of hi
};

std::vector<Tap> make_taps( std::size_t nIn, double dIn, std::size_t nOut, double dOut, InterpolationMode mode )
{
	std::vector<Tap> taps( nOut );
	const double last = static_cast<double>( nIn - 1 );
	for( std::size_t j = 0; j < nOut; ++j ) {
		double u = std::clamp( source_coordinate( j, nIn, dIn, nOut, dOut ), 0.0, last );
		if( mode == InterpolationMode::Nearest ) {
			const auto k = static_cast<std::size_t>( std::floor( u + 0.5 ) );
			taps[j] = { std::min( k, nIn - 1 ), std::min( k, nIn - 1 ), 0.0 };
			continue;
		}
		const auto lo = static_cast<std::size_t>( std::floor( u ) );
		const std::size_t hi = std::min( lo + 1, nIn - 1 );
		taps[j] = { lo, hi, u - static_cast<double>( lo ) };
	}
	return taps;
}

// Resamples one axis of a dense buffer laid out as (outer, n, inner).
template<typename T>
std::vector<T> resample_axis( const std::vector<T>& in, std::size_t outer, std::size_t nIn, std::size_t inner,
	const std::vector<Tap>& taps )
{
	const std::size_t nOut = taps.size();
	std::vector<T> out( outer * nOut * inner );
	for( std::size_t o = 0; o < outer; ++o ) {
		for( std::size_t j = 0; j < nOut; ++j ) {
			const Tap& t = taps[j];
			const T* lo = in.data() + ( o * nIn + t.lo ) * inner;
			const T* hi = in.data() + ( o * nIn + t.hi ) * inner;
			T* dst = out.data() + ( o * nOut + j ) * inner;
			if( t.w == 0.0 ) {
				std::copy( lo, lo + inner, dst );
				continue;
			}
			for( std::size_t i = 0; i < inner; ++i ) {
				dst[i] = static_cast<T>( ( 1.0 - t.w ) * lo[i] + t.w * hi[i] );
			}
		}
	}
	return out;
}

template<typename G>
void resample_grid( const G& in, G& out, Spacing target, InterpolationMode mode )
{
	if( !target.valid() || !in.spacing.valid() ) {
		throw ArgumentError( "resample: spacing must be positive" );
	}
	const Shape3 s = in.shape;
	const Shape3 o{ output_extent( s.nz, in.spacing.dz, target.dz ), output_extent( s.ny, in.spacing.dy, target.dy ),
		output_extent( s.nx, in.spacing.dx, target.dx ) };
	auto data = resample_axis( in.data, s.nz * s.ny, s.nx, 1, make_taps( s.nx, in.spacing.dx, o.nx, target.dx, mode ) );
	data = resample_axis( data, s.nz, s.ny, o.nx, make_taps( s.ny, in.spacing.dy, o.ny, target.dy, mode ) );
	data = resample_axis( data, 1, s.nz, o.ny * o.nx, make_taps( s.nz, in.spacing.dz, o.nz, target.dz, mode ) );
	out.shape = o;
	out.spacing = target;
	out.data = std::move( data );
}

template<typename T>
Plane<T> crop_plane( const T* src, std::size_t h, std::size_t w, std::size_t outH, std::size_t outW )
{
	Plane<T> out( outH, outW, T{} );
	const std::ptrdiff_t oy = crop_offset( h, outH );
	const std::ptrdiff_t ox = crop_offset( w, outW );
	for( std::size_t y = 0; y < outH; ++y ) {
		const std::ptrdiff_t sy = static_cast<std::ptrdiff_t>( y ) + oy;
		if( sy < 0 || sy >= static_cast<std::ptrdiff_t>( h ) ) {
			continue;
		}
		for( std::size_t x = 0; x < outW; ++x ) {
			const std::ptrdiff_t sx = static_cast<std::ptrdiff_t>( x ) + ox;
			if( sx < 0 || sx >= static_cast<std::ptrdiff_t>( w ) ) {
				continue;
			}
			out.at( y, x ) = src[sy * static_cast<std::ptrdiff_t>( w ) + sx];
		}
	}
	return out;
}

template<typename G>
void crop_grid( const G& in, G& out, std::size_t outH, std::size_t outW )
{
	out.shape = { in.shape.nz, outH, outW };
	out.spacing = in.spacing;
	out.data.assign( out.shape.size(), {} );
	for( std::size_t z = 0; z < in.shape.nz; ++z ) {
		auto plane = crop_plane( in.data.data() + z * in.shape.plane(), in.shape.ny, in.shape.nx, outH, outW );
		std::copy( plane.data.begin(), plane.data.end(), out.data.begin() + z * out.shape.plane() );
	}
}

} // namespace

Volume resample( const Volume& volume, Spacing target, InterpolationMode mode )
{
	Volume out;
	out.sequence = volume.sequence;
	resample_grid( volume, out, target, mode );
	return out;
}

LabelVolume resample( const LabelVolume& labels, Spacing target, InterpolationMode mode )
{
	if( mode != InterpolationMode::Nearest ) {
		throw ArgumentError( "resample: label volumes require nearest-neighbour interpolation" );
	}
	LabelVolume out;
	resample_grid( labels, out, target, mode );
	return out;
}

std::ptrdiff_t crop_offset( std::size_t input, std::size_t output )
{
	const auto diff = static_cast<std::ptrdiff_t>( input ) - static_cast<std::ptrdiff_t>( output );
	if( diff >= 0 ) {
		return diff / 2;
	}
	// Pad: the smaller half goes before the data.
	return -( ( -diff ) / 2 );
}

Plane<float> center_crop( const Plane<float>& plane, std::size_t outH, std::size_t outW )
{
	return crop_plane( plane.data.data(), plane.height, plane.width, outH, outW );
}

Plane<std::uint8_t> center_crop( const Plane<std::uint8_t>& plane, std::size_t outH, std::size_t outW )
{
	return crop_plane( plane.data.data(), plane.height, plane.width, outH, outW );
}

Volume center_crop( const Volume& volume, std::size_t outH, std::size_t outW )
{
	Volume out;
	out.sequence = volume.sequence;
	crop_grid( volume, out, outH, outW );
	return out;
}

LabelVolume center_crop( const LabelVolume& labels, std::size_t outH, std::size_t outW )
{
	LabelVolume out;
	crop_grid( labels, out, outH, outW );
	return out;
}

NormalizationResult normalize_intensity( const Volume& volume, std::span<const std::uint8_t> glandMask )
{
	if( glandMask.size() != volume.data.size() ) {
		throw ArgumentError( "normalize_intensity: mask size does not match the volume" );
	}
	double sum = 0;
	std::size_t count = 0;
	for( std::size_t i = 0; i < glandMask.size(); ++i ) {
		if( glandMask[i] != 0 ) {
			sum += volume.data[i];
			++count;
		}
	}
	if( count == 0 ) {
		throw ArgumentError( "normalize_intensity: empty gland mask" );
	}
	const double mean = sum / static_cast<double>( count );
	double ss = 0;
	for( std::size_t i = 0; i < glandMask.size(); ++i ) {
		if( glandMask[i] != 0 ) {
			const double d = volume.data[i] - mean;
			ss += d * d;
		}
	}
	const double stddev = std::sqrt( ss / static_cast<double>( count ) );

	NormalizationResult result;
	result.volume = volume;
	result.mean = mean;
	result.stddev = stddev;
	result.degenerate = !( stddev > 0 );
	for( std::size_t i = 0; i < glandMask.size(); ++i ) {
		const double centered = volume.data[i] - mean;
		if( result.degenerate ) {
			result.volume.data[i] = glandMask[i] != 0 ? 0.f : static_cast<float>( centered );
		} else {
			result.volume.data[i] = static_cast<float>( centered / stddev );
		}
	}
	return result;
}

NormalizationResult normalize_intensity( const Volume& volume, const LabelVolume& labels )
{
	if( labels.shape != volume.shape ) {
		throw ArgumentError( "normalize_intensity: label geometry does not match the volume" );
	}
	std::vector<std::uint8_t> mask( labels.data.size() );
	std::transform( labels.data.begin(), labels.data.end(), mask.begin(), []( std::uint8_t l ) { return is_gland( l ) ? 1 : 0; } );
	return normalize_intensity( volume, mask );
}

SliceStack slice_window( const Volume& volume, std::size_t center )
{
	const std::size_t nz = volume.shape.nz;
	if( center >= nz ) {
		throw ArgumentError( "slice_window: center index out of range" );
	}
	SliceStack stack;
	stack.center_index = center;
	stack.source_indices = { center == 0 ? 0 : center - 1, center, std::min( center + 1, nz - 1 ) };
	for( int k = 0; k < 3; ++k ) {
		Plane<float>& plane = stack.slices[k];
		plane.height = volume.shape.ny;
		plane.width = volume.shape.nx;
		auto src = volume.slice( stack.source_indices[k] );
		plane.data.assign( src.begin(), src.end() );
	}
	return stack;
}

std::vector<SliceStack> extract_slice_windows( const Volume& volume )
{
	std::vector<SliceStack> stacks;
	stacks.reserve( volume.shape.nz );
	for( std::size_t z = 0; z < volume.shape.nz; ++z ) {
		stacks.push_back( slice_window( volume, z ) );
	}
	return stacks;
}

PreprocessedCase preprocess_case( const std::vector<Volume>& sequences, const LabelVolume& labels, Spacing target, std::size_t crop )
{
	PreprocessedCase out;
	out.labels = center_crop( resample( labels, target, InterpolationMode::Nearest ), crop, crop );
	for( const Volume& v : sequences ) {
		Volume cropped = center_crop( resample( v, target, InterpolationMode::Linear ), crop, crop );
		if( cropped.shape != out.labels.shape ) {
			throw ArgumentError( std::string( "preprocess: sequence " ) + sequence_name( v.sequence ) +
				" does not align with the label volume after resampling" );
		}
		NormalizationResult n = normalize_intensity( cropped, out.labels );
		out.degenerate.push_back( n.degenerate );
		out.sequences.push_back( std::move( n.volume ) );
	}
	return out;
}

} // namespace provit
