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

#include "provit/nifti.hpp"

#include <zlib.h>

#include <array>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>
#include <string>
#include <vector>

#include "provit/error.hpp"

static_assert( std::endian::native == std::endian::little, "NIfTI I/O assumes a little-endian host" );

namespace provit {

namespace {

constexpr int kHeaderSize = 348;
constexpr int kVoxOffset = 352;
constexpr short kIntentLabel = 1002;

enum DataType : short {
	kUint8 = 2,
	kInt16 = 4,
	kInt32 = 8,
	kFloat32 = 16,
	kFloat64 = 64,
};

// Byte offsets of the NIfTI-1 header fields we touch.
namespace off {
constexpr std::size_t sizeof_hdr = 0;
constexpr std::size_t dim = 40;
constexpr std::size_t intent_code = 68;
constexpr std::size_t datatype = 70;
constexpr std::size_t bitpix = 72;
constexpr std::size_t pixdim = 76;
constexpr std::size_t vox_offset = 108;
constexpr std::size_t scl_slope = 112;
constexpr std::size_t scl_inter = 116;
constexpr std::size_t xyzt_units = 123;
constexpr std::size_t descrip = 148;
constexpr std::size_t qform_code = 252;
constexpr std::size_t sform_code = 254;
constexpr std::size_t srow_x = 280;
constexpr std::size_t magic = 344;
} // namespace off

template<typename T>
T get( const std::vector<unsigned char>& bytes, std::size_t offset )
{
	T value;
	std::memcpy( &value, bytes.data() + offset, sizeof( T ) );
	return value;
}

template<typename T>
void put( std::vector<unsigned char>& bytes, std::size_t offset, T value )
{
	std::memcpy( bytes.data() + offset, &value, sizeof( T ) );
}

std::vector<unsigned char> slurp( const std::filesystem::path& path )
{
	// gzread passes plain files through unchanged.
	gzFile file = gzopen( path.string().c_str(), "rb" );
	if( file == nullptr ) {
		throw IoError( "cannot open " + path.string() );
	}
	std::vector<unsigned char> bytes;
	std::array<unsigned char, 1 << 16> buffer;
	for( ;; ) {
		const int n = gzread( file, buffer.data(), static_cast<unsigned>( buffer.size() ) );
		if( n < 0 ) {
			int code = 0;
			const std::string message = gzerror( file, &code );
			gzclose( file );
			throw IoError( "read error in " + path.string() + ": " + message );
		}
		if( n == 0 ) {
			break;
		}
		bytes.insert( bytes.end(), buffer.begin(), buffer.begin() + n );
	}
	gzclose( file );
	return bytes;
}

void spill( const std::filesystem::path& path, const std::vector<unsigned char>& bytes )
{
	const std::string name = path.string();
	if( name.size() >= 3 && name.compare( name.size() - 3, 3, ".gz" ) == 0 ) {
		gzFile file = gzopen( name.c_str(), "wb6" );
		if( file == nullptr ) {
			throw IoError( "cannot open " + name + " for writing" );
		}
		const int n = gzwrite( file, bytes.data(), static_cast<unsigned>( bytes.size() ) );
		const int closed = gzclose( file );
		if( n != static_cast<int>( bytes.size() ) || closed != Z_OK ) {
			throw IoError( "write error in " + name );
		}
		return;
	}
	std::ofstream out( path, std::ios::binary );
	if( !out ) {
		throw IoError( "cannot open " + name + " for writing" );
	}
	out.write( reinterpret_cast<const char*>( bytes.data() ), static_cast<std::streamsize>( bytes.size() ) );
	if( !out ) {
		throw IoError( "write error in " + name );
	}
}

struct Header {
	Shape3 shape;
	Spacing spacing;
	short datatype = 0;
	short intent = 0;
	std::size_t voxOffset = 0;
	float slope = 0;
	float inter = 0;
	std::string descrip;
};

Header parse_header( const std::vector<unsigned char>& bytes, const std::string& name )
{
	if( bytes.size() < kHeaderSize ) {
		throw IoError( name + ": truncated header (" + std::to_string( bytes.size() ) + " bytes)" );
	}
	const int sizeofHdr = get<int>( bytes, off::sizeof_hdr );
	if( sizeofHdr != kHeaderSize ) {
		if( __builtin_bswap32( static_cast<std::uint32_t>( sizeofHdr ) ) == kHeaderSize ) {
			throw UnsupportedError( name + ": big-endian NIfTI is not supported" );
		}
		throw FormatError( name + ": sizeof_hdr is " + std::to_string( sizeofHdr ) + ", expected 348" );
	}
	const char* magic = reinterpret_cast<const char*>( bytes.data() + off::magic );
	if( std::memcmp( magic, "n+1\0", 4 ) != 0 ) {
		if( std::memcmp( magic, "ni1\0", 4 ) == 0 ) {
			throw FormatError( name + ": detached header/image pairs (magic ni1) are not supported" );
		}
		throw FormatError( name + ": bad magic, not a single-file NIfTI-1 image" );
	}

	Header h;
	const short ndim = get<short>( bytes, off::dim );
	if( ndim < 3 || ndim > 7 ) {
		throw UnsupportedError( name + ": dim[0] = " + std::to_string( ndim ) + ", only 3D images are supported" );
	}
	std::array<short, 8> dim{};
	for( int i = 0; i < 8; ++i ) {
		dim[i] = get<short>( bytes, off::dim + 2 * i );
	}
	for( int i = 4; i <= ndim; ++i ) {
		if( dim[i] != 1 ) {
			throw UnsupportedError( name + ": multi-frame images are not supported" );
		}
	}
	if( dim[1] < 1 || dim[2] < 1 || dim[3] < 1 ) {
		throw FormatError( name + ": non-positive image dimension" );
	}
	h.shape = { static_cast<std::size_t>( dim[3] ), static_cast<std::size_t>( dim[2] ), static_cast<std::size_t>( dim[1] ) };
	h.spacing = { std::fabs( get<float>( bytes, off::pixdim + 12 ) ), std::fabs( get<float>( bytes, off::pixdim + 8 ) ),
		std::fabs( get<float>( bytes, off::pixdim + 4 ) ) };
	if( !h.spacing.valid() ) {
		throw FormatError( name + ": non-positive pixdim" );
	}
	h.datatype = get<short>( bytes, off::datatype );
	h.intent = get<short>( bytes, off::intent_code );
	const float voxOffset = get<float>( bytes, off::vox_offset );
	if( !( voxOffset >= kHeaderSize ) ) {
		throw FormatError( name + ": vox_offset " + std::to_string( voxOffset ) + " inside header" );
	}
	h.voxOffset = static_cast<std::size_t>( voxOffset );
	h.slope = get<float>( bytes, off::scl_slope );
	h.inter = get<float>( bytes, off::scl_inter );
	const char* descrip = reinterpret_cast<const char*>( bytes.data() + off::descrip );
	h.descrip.assign( descrip, strnlen( descrip, 80 ) );
	return h;
}

std::size_t bytes_per_voxel( short datatype, const std::string& name )
{
	switch( datatype ) {
		case kUint8:
			return 1;
		case kInt16:
			return 2;
		case kInt32:
			return 4;
		case kFloat32:
			return 4;
		case kFloat64:
			return 8;
		default:
			throw UnsupportedError( name + ": unsupported datatype code " + std::to_string( datatype ) );
	}
}

double raw_voxel( const unsigned char* p, short datatype )
{
	switch( datatype ) {
		case kUint8:
			return *p;
		case kInt16: {
			std::int16_t v;
			std::memcpy( &v, p, 2 );
			return v;
		}
		case kInt32: {
			std::int32_t v;
			std::memcpy( &v, p, 4 );
			return v;
		}
		case kFloat32: {
			float v;
			std::memcpy( &v, p, 4 );
			return v;
		}
		default: {
			double v;
			std::memcpy( &v, p, 8 );
			return v;
		}
	}
}

std::vector<unsigned char> make_header( Shape3 shape, Spacing spacing, short datatype, short bitpix, short intent,
	const std::string& descrip )
{
	std::vector<unsigned char> bytes( kVoxOffset, 0 );
	put<int>( bytes, off::sizeof_hdr, kHeaderSize );
	const std::array<short, 8> dim = { 3, static_cast<short>( shape.nx ), static_cast<short>( shape.ny ),
		static_cast<short>( shape.nz ), 1, 1, 1, 1 };
	for( int i = 0; i < 8; ++i ) {
		put<short>( bytes, off::dim + 2 * i, dim[i] );
	}
	put<short>( bytes, off::intent_code, intent );
	put<short>( bytes, off::datatype, datatype );
	put<short>( bytes, off::bitpix, bitpix );
	const std::array<float, 8> pixdim = { 1.f, static_cast<float>( spacing.dx ), static_cast<float>( spacing.dy ),
		static_cast<float>( spacing.dz ), 1.f, 1.f, 1.f, 1.f };
	for( int i = 0; i < 8; ++i ) {
		put<float>( bytes, off::pixdim + 4 * i, pixdim[i] );
	}
	put<float>( bytes, off::vox_offset, static_cast<float>( kVoxOffset ) );
	put<float>( bytes, off::scl_slope, 1.f );
	put<float>( bytes, off::scl_inter, 0.f );
	bytes[off::xyzt_units] = 2; // millimeters
	std::memcpy( bytes.data() + off::descrip, descrip.data(), std::min<std::size_t>( descrip.size(), 79 ) );
	// Axial-canonical scanner transform: diagonal sform with the voxel sizes.
	put<short>( bytes, off::qform_code, 0 );
	put<short>( bytes, off::sform_code, 1 );
	const float srow[3][4] = { { static_cast<float>( spacing.dx ), 0, 0, 0 }, { 0, static_cast<float>( spacing.dy ), 0, 0 },
		{ 0, 0, static_cast<float>( spacing.dz ), 0 } };
	for( int r = 0; r < 3; ++r ) {
		for( int c = 0; c < 4; ++c ) {
			put<float>( bytes, off::srow_x + 16 * r + 4 * c, srow[r][c] );
		}
	}
	std::memcpy( bytes.data() + off::magic, "n+1\0", 4 );
	return bytes;
}

void check_writable_shape( Shape3 shape )
{
	constexpr std::size_t limit = std::numeric_limits<short>::max();
	if( shape.nx > limit || shape.ny > limit || shape.nz > limit || shape.size() == 0 ) {
		throw ArgumentError( "volume shape cannot be represented in a NIfTI-1 header" );
	}
}

} // namespace

AnyVolume read_nifti( const std::filesystem::path& path, NiftiHint hint )
{
	const std::string name = path.string();
	const std::vector<unsigned char> bytes = slurp( path );
	const Header h = parse_header( bytes, name );
	const std::size_t bpv = bytes_per_voxel( h.datatype, name );
	const std::size_t count = h.shape.size();
	if( bytes.size() < h.voxOffset + count * bpv ) {
		throw IoError( name + ": truncated voxel data" );
	}
	const bool integral = h.datatype == kUint8 || h.datatype == kInt16 || h.datatype == kInt32;
	const bool scaled = h.slope != 0 && std::isfinite( h.slope ) && !( h.slope == 1 && h.inter == 0 );
	const bool asLabels = hint == NiftiHint::Labels || ( hint == NiftiHint::Auto && integral && h.intent == kIntentLabel );
	const unsigned char* voxels = bytes.data() + h.voxOffset;

	if( asLabels ) {
		if( !integral ) {
			throw UnsupportedError( name + ": label volumes must use an integer datatype" );
		}
		LabelVolume labels( h.shape, h.spacing );
		for( std::size_t i = 0; i < count; ++i ) {
			double v = raw_voxel( voxels + i * bpv, h.datatype );
			if( scaled ) {
				v = v * h.slope + h.inter;
			}
			if( v < 0 || v > static_cast<double>( kCsPCa ) || v != std::floor( v ) ) {
				throw FormatError( name + ": label value " + std::to_string( v ) + " outside {0,1,2,3}" );
			}
			labels.data[i] = static_cast<std::uint8_t>( v );
		}
		return labels;
	}

	Volume volume( h.shape, h.spacing );
	const std::string prefix = "provit:";
	if( h.descrip.rfind( prefix, 0 ) == 0 ) {
		try {
			volume.sequence = parse_sequence( h.descrip.substr( prefix.size() ) );
		} catch( const ArgumentError& ) {
			// Foreign description; keep the default tag.
		}
	}
	for( std::size_t i = 0; i < count; ++i ) {
		double v = raw_voxel( voxels + i * bpv, h.datatype );
		if( scaled ) {
			v = v * h.slope + h.inter;
		}
		volume.data[i] = static_cast<float>( v );
	}
	return volume;
}

Volume read_volume( const std::filesystem::path& path )
{
	return std::get<Volume>( read_nifti( path, NiftiHint::Intensity ) );
}

LabelVolume read_labels( const std::filesystem::path& path )
{
	return std::get<LabelVolume>( read_nifti( path, NiftiHint::Labels ) );
}

void write_nifti( const Volume& volume, const std::filesystem::path& path )
{
	volume.validate();
	check_writable_shape( volume.shape );
	std::vector<unsigned char> bytes = make_header( volume.shape, volume.spacing, kFloat32, 32, 0,
		std::string( "provit:" ) + sequence_name( volume.sequence ) );
	const std::size_t start = bytes.size();
	bytes.resize( start + volume.data.size() * sizeof( float ) );
	std::memcpy( bytes.data() + start, volume.data.data(), volume.data.size() * sizeof( float ) );
	spill( path, bytes );
}

void write_nifti( const LabelVolume& labels, const std::filesystem::path& path )
{
	labels.validate();
	check_writable_shape( labels.shape );
	std::vector<unsigned char> bytes = make_header( labels.shape, labels.spacing, kUint8, 8, kIntentLabel, "provit:labels" );
	bytes.insert( bytes.end(), labels.data.begin(), labels.data.end() );
	spill( path, bytes );
}

} // namespace provit
