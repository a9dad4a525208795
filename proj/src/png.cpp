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

#include "provit/png.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <vector>

#include <png.h>

#include "provit/error.hpp"

namespace provit {

std::array<std::uint8_t, 3> jet( double t )
{
	if( std::isnan( t ) ) {
		t = 0.0;
	}
	t = std::clamp( t, 0.0, 1.0 );
	auto channel = [t] ( double center ) {
		const double v = std::clamp( 1.5 - std::fabs( 4.0 * t - center ), 0.0, 1.0 );
		return static_cast<std::uint8_t>( std::lround( 255.0 * v ) );
	};
	return { channel( 3.0 ), channel( 2.0 ), channel( 1.0 ) };
}

void write_png_rgb( const std::string& path, std::size_t width, std::size_t height, const std::uint8_t* rgb )
{
	FILE* fp = std::fopen( path.c_str(), "wb" );
	if( fp == nullptr ) {
		throw IoError( "cannot open '" + path + "' for writing" );
	}
	png_structp png = png_create_write_struct( PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr );
	png_infop info = png ? png_create_info_struct( png ) : nullptr;
	if( png == nullptr || info == nullptr ) {
		png_destroy_write_struct( &png, nullptr );
		std::fclose( fp );
		throw IoError( "libpng initialization failed" );
	}
	if( setjmp( png_jmpbuf( png ) ) ) {
		png_destroy_write_struct( &png, &info );
		std::fclose( fp );
		throw IoError( "failed writing PNG '" + path + "'" );
	}
	png_init_io( png, fp );
	png_set_compression_level( png, 6 );
	png_set_IHDR( png, info, static_cast<png_uint_32>( width ), static_cast<png_uint_32>( height ), 8, PNG_COLOR_TYPE_RGB,
		PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT );
	png_write_info( png, info );
	for( std::size_t y = 0; y < height; ++y ) {
		png_write_row( png, const_cast<png_bytep>( rgb + y * width * 3 ) );
	}
	png_write_end( png, nullptr );
	png_destroy_write_struct( &png, &info );
	if( std::fclose( fp ) != 0 ) {
		throw IoError( "failed closing '" + path + "'" );
	}
}

void write_heatmap_png( const std::string& path, const Plane<float>& plane, double lo, double hi )
{
	if( !( hi > lo ) ) {
		throw ArgumentError( "heatmap range must satisfy hi > lo" );
	}
	std::vector<std::uint8_t> rgb( plane.height * plane.width * 3 );
	for( std::size_t i = 0; i < plane.data.size(); ++i ) {
		const auto c = jet( ( plane.data[i] - lo ) / ( hi - lo ) );
		std::copy( c.begin(), c.end(), rgb.begin() + static_cast<long>( 3 * i ) );
	}
	write_png_rgb( path, plane.width, plane.height, rgb.data() );
}

} // namespace provit
