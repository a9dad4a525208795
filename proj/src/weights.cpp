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

#include "provit/weights.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iterator>
#include <map>

#include "provit/error.hpp"

namespace provit {

namespace {

constexpr char kMagic[8] = { 'P', 'V', 'T', 'W', 'B', 0, 0, 1 };
constexpr std::uint32_t kVersion = 1;

class Writer {
public:
	template<typename U>
	void put( U v )
	{
		unsigned char b[sizeof( U )];
		std::memcpy( b, &v, sizeof( U ) );
		bytes.insert( bytes.end(), b, b + sizeof( U ) );
	}
	void put_bytes( const void* p, std::size_t n )
	{
		const auto* c = static_cast<const unsigned char*>( p );
		bytes.insert( bytes.end(), c, c + n );
	}
	std::vector<std::uint8_t> bytes;
};

class Reader {
public:
	explicit Reader( const std::vector<std::uint8_t>& b, std::size_t end ) : bytes_( b ), end_( end ) {}
	template<typename U>
	U get()
	{
		U v;
		std::memcpy( &v, take( sizeof( U ) ), sizeof( U ) );
		return v;
	}
	const std::uint8_t* take( std::size_t n )
	{
		if( n > end_ - pos_ ) {
			throw FormatError( "weight bundle is truncated" );
		}
		const std::uint8_t* p = bytes_.data() + pos_;
		pos_ += n;
		return p;
	}
	std::size_t pos() const { return pos_; }

private:
	const std::vector<std::uint8_t>& bytes_;
	std::size_t end_;
	std::size_t pos_ = 0;
};

template<typename T>
DType dtype_of()
{
	return sizeof( T ) == 4 ? DType::Float32 : DType::Float64;
}

template<typename T>
NamedArray to_array( const std::string& name, const ag::Matrix<T>& m )
{
	NamedArray a;
	a.name = name;
	a.dtype = dtype_of<T>();
	a.shape = { static_cast<std::uint64_t>( m.rows() ), static_cast<std::uint64_t>( m.cols() ) };
	a.values.assign( m.data(), m.data() + m.size() );
	return a;
}

template<typename T>
void copy_into( ag::Matrix<T>& dst, const NamedArray& a )
{
	for( Eigen::Index i = 0; i < dst.size(); ++i ) {
		dst.data()[i] = static_cast<T>( a.values[i] );
	}
}

bool same_shape( const NamedArray& a, Eigen::Index rows, Eigen::Index cols )
{
	return a.shape.size() == 2 && a.shape[0] == static_cast<std::uint64_t>( rows ) && a.shape[1] == static_cast<std::uint64_t>( cols );
}

std::string shape_text( const std::vector<std::uint64_t>& shape )
{
	std::string s = "(";
	for( std::size_t i = 0; i < shape.size(); ++i ) {
		s += ( i ? "," : "" ) + std::to_string( shape[i] );
	}
	return s + ")";
}

// Named views of every tensor a model persists, including normalization running statistics.
template<typename T>
std::vector<std::pair<std::string, ag::Matrix<T>*>> model_tensors( Model<T>& model )
{
	std::vector<std::pair<std::string, ag::Matrix<T>*>> out;
	for( auto& p : model.params().all() ) {
		out.emplace_back( p.name, &p.var.mutable_value() );
	}
	if( auto* head = model.head() ) {
		auto& states = head->norm_states();
		for( std::size_t l = 0; l < states.size(); ++l ) {
			const std::string n = "head.mlp" + std::to_string( l ) + ".bn.";
			out.emplace_back( n + "running_mean", &states[l].running_mean );
			out.emplace_back( n + "running_var", &states[l].running_var );
		}
	}
	return out;
}

double cubic( double x )
{
	constexpr double A = -0.75;
	x = std::fabs( x );
	if( x <= 1.0 ) {
		return ( ( A + 2.0 ) * x - ( A + 3.0 ) ) * x * x + 1.0;
	}
	if( x < 2.0 ) {
		return ( ( A * x - 5.0 * A ) * x + 8.0 * A ) * x - 4.0 * A;
	}
	return 0.0;
}

// Interpolation matrix (out x in) for one axis.
ag::Matrix<double> cubic_weights( int in, int out )
{
	ag::Matrix<double> w = ag::Matrix<double>::Zero( out, in );
	const double scale = static_cast<double>( in ) / out;
	for( int o = 0; o < out; ++o ) {
		const double src = ( o + 0.5 ) * scale - 0.5;
		const int base = static_cast<int>( std::floor( src ) );
		const double t = src - base;
		for( int k = -1; k <= 2; ++k ) {
			const int idx = std::clamp( base + k, 0, in - 1 );
			w( o, idx ) += cubic( t - k );
		}
	}
	return w;
}

} // namespace

std::uint64_t NamedArray::element_count() const
{
	std::uint64_t n = 1;
	for( auto d : shape ) {
		n *= d;
	}
	return n;
}

const NamedArray* WeightBundle::find( const std::string& name ) const
{
	for( const auto& a : arrays ) {
		if( a.name == name ) {
			return &a;
		}
	}
	return nullptr;
}

std::uint64_t fnv1a64( const void* data, std::size_t size, std::uint64_t seed )
{
	std::uint64_t h = seed;
	const auto* p = static_cast<const unsigned char*>( data );
	for( std::size_t i = 0; i < size; ++i ) {
		h ^= p[i];
		h *= 1099511628211ULL;
	}
	return h;
}

std::string hex64( std::uint64_t v )
{
	char buf[17];
	std::snprintf( buf, sizeof( buf ), "%016llx", static_cast<unsigned long long>( v ) );
	return buf;
}

std::vector<std::uint8_t> serialize_bundle( WeightBundle& bundle )
{
	Writer w;
	w.put_bytes( kMagic, sizeof( kMagic ) );
	w.put<std::uint32_t>( kVersion );
	const std::string cfg = bundle.config.dump();
	w.put<std::uint64_t>( cfg.size() );
	w.put_bytes( cfg.data(), cfg.size() );
	w.put<std::uint32_t>( static_cast<std::uint32_t>( bundle.arrays.size() ) );
	for( const auto& a : bundle.arrays ) {
		if( a.name.size() > 0xFFFF || a.shape.size() > 0xFF || a.values.size() != a.element_count() ) {
			throw ArgumentError( "weight bundle array '" + a.name + "' is malformed" );
		}
		w.put<std::uint16_t>( static_cast<std::uint16_t>( a.name.size() ) );
		w.put_bytes( a.name.data(), a.name.size() );
		w.put<std::uint8_t>( static_cast<std::uint8_t>( a.dtype ) );
		w.put<std::uint8_t>( static_cast<std::uint8_t>( a.shape.size() ) );
		for( auto d : a.shape ) {
			w.put<std::uint64_t>( d );
		}
		for( double v : a.values ) {
			if( a.dtype == DType::Float32 ) {
				w.put<float>( static_cast<float>( v ) );
			} else {
				w.put<double>( v );
			}
		}
	}
	const std::uint64_t h = fnv1a64( w.bytes.data(), w.bytes.size() );
	w.put<std::uint64_t>( h );
	bundle.hash = hex64( h );
	return std::move( w.bytes );
}

WeightBundle parse_bundle( const std::vector<std::uint8_t>& bytes )
{
	if( bytes.size() < sizeof( kMagic ) + 8 || std::memcmp( bytes.data(), kMagic, sizeof( kMagic ) ) != 0 ) {
		throw FormatError( "not a weight bundle (bad magic)" );
	}
	const std::size_t body = bytes.size() - 8;
	std::uint64_t stored;
	std::memcpy( &stored, bytes.data() + body, 8 );
	if( fnv1a64( bytes.data(), body ) != stored ) {
		throw FormatError( "weight bundle content hash mismatch" );
	}
	Reader r( bytes, body );
	r.take( sizeof( kMagic ) );
	const auto version = r.get<std::uint32_t>();
	if( version != kVersion ) {
		throw UnsupportedError( "weight bundle version " + std::to_string( version ) + " is not supported" );
	}
	WeightBundle b;
	const auto cfgLen = r.get<std::uint64_t>();
	const auto* cfg = reinterpret_cast<const char*>( r.take( cfgLen ) );
	try {
		b.config = nlohmann::json::parse( cfg, cfg + cfgLen );
	} catch( const nlohmann::json::exception& e ) {
		throw FormatError( std::string( "weight bundle config is not valid JSON: " ) + e.what() );
	}
	const auto count = r.get<std::uint32_t>();
	for( std::uint32_t i = 0; i < count; ++i ) {
		NamedArray a;
		const auto nameLen = r.get<std::uint16_t>();
		const auto* name = reinterpret_cast<const char*>( r.take( nameLen ) );
		a.name.assign( name, nameLen );
		const auto dt = r.get<std::uint8_t>();
		if( dt != 1 && dt != 2 ) {
			throw UnsupportedError( "weight bundle array '" + a.name + "' has unknown dtype " + std::to_string( dt ) );
		}
		a.dtype = static_cast<DType>( dt );
		const auto rank = r.get<std::uint8_t>();
		for( int k = 0; k < rank; ++k ) {
			a.shape.push_back( r.get<std::uint64_t>() );
		}
		const std::uint64_t n = a.element_count();
		const std::size_t width = a.dtype == DType::Float32 ? 4 : 8;
		if( n > ( body - r.pos() ) / width ) {
			throw FormatError( "weight bundle is truncated in array '" + a.name + "'" );
		}
		const std::uint8_t* src = r.take( n * width );
		a.values.resize( n );
		for( std::uint64_t k = 0; k < n; ++k ) {
			if( a.dtype == DType::Float32 ) {
				float f;
				std::memcpy( &f, src + k * 4, 4 );
				a.values[k] = f;
			} else {
				std::memcpy( &a.values[k], src + k * 8, 8 );
			}
		}
		b.arrays.push_back( std::move( a ) );
	}
	if( r.pos() != body ) {
		throw FormatError( "weight bundle has trailing bytes" );
	}
	b.hash = hex64( stored );
	return b;
}

void write_bundle( WeightBundle& bundle, const std::string& path )
{
	const auto bytes = serialize_bundle( bundle );
	std::ofstream out( path, std::ios::binary );
	if( !out ) {
		throw IoError( "cannot open '" + path + "' for writing" );
	}
	out.write( reinterpret_cast<const char*>( bytes.data() ), static_cast<std::streamsize>( bytes.size() ) );
	if( !out ) {
		throw IoError( "failed writing '" + path + "'" );
	}
}

WeightBundle read_bundle( const std::string& path )
{
	std::ifstream in( path, std::ios::binary );
	if( !in ) {
		throw IoError( "cannot open weight bundle '" + path + "'" );
	}
	std::vector<std::uint8_t> bytes( ( std::istreambuf_iterator<char>( in ) ), std::istreambuf_iterator<char>() );
	return parse_bundle( bytes );
}

template<typename T>
WeightBundle bundle_from_model( Model<T>& model )
{
	WeightBundle b;
	b.config = to_json( model.config() );
	for( auto& [name, m] : model_tensors( model ) ) {
		b.arrays.push_back( to_array( name, *m ) );
	}
	return b;
}

template<typename T>
void load_into_model( Model<T>& model, const WeightBundle& bundle )
{
	std::vector<std::string> problems;
	auto tensors = model_tensors( model );
	for( auto& [name, m] : tensors ) {
		const NamedArray* a = bundle.find( name );
		if( a == nullptr ) {
			problems.push_back( name + " missing" );
		} else if( !same_shape( *a, m->rows(), m->cols() ) ) {
			problems.push_back( name + " has shape " + shape_text( a->shape ) );
		}
	}
	if( bundle.arrays.size() != tensors.size() ) {
		problems.push_back( "bundle holds " + std::to_string( bundle.arrays.size() ) + " arrays, model has " +
			std::to_string( tensors.size() ) );
	}
	if( !problems.empty() ) {
		std::string msg = "weight bundle does not match the model:";
		for( const auto& p : problems ) {
			msg += " [" + p + "]";
		}
		throw LoadError( msg );
	}
	for( auto& [name, m] : tensors ) {
		copy_into( *m, *bundle.find( name ) );
	}
}

template<typename T>
Model<T> model_from_bundle( const WeightBundle& bundle )
{
	ViTConfig cfg = vit_config_from_json( bundle.config );
	Model<T> model( cfg );
	load_into_model( model, bundle );
	return model;
}

nlohmann::json LoadReport::to_json() const
{
	return { { "loaded", loaded }, { "adapted", adapted }, { "initialized", initialized }, { "unexpected", unexpected },
		{ "source_hash", source_hash } };
}

ag::Matrix<double> resize_positions( const ag::Matrix<double>& table, int gIn, int gOut )
{
	if( table.rows() != static_cast<Eigen::Index>( gIn ) * gIn ) {
		throw ArgumentError( "resize_positions: table rows do not form a square grid" );
	}
	const ag::Matrix<double> w = cubic_weights( gIn, gOut );
	const Eigen::Index d = table.cols();
	ag::Matrix<double> out( static_cast<Eigen::Index>( gOut ) * gOut, d );
	for( Eigen::Index c = 0; c < d; ++c ) {
		ag::Matrix<double> grid( gIn, gIn );
		for( int i = 0; i < gIn; ++i ) {
			for( int j = 0; j < gIn; ++j ) {
				grid( i, j ) = table( i * gIn + j, c );
			}
		}
		const ag::Matrix<double> resized = w * grid * w.transpose();
		for( int i = 0; i < gOut; ++i ) {
			for( int j = 0; j < gOut; ++j ) {
				out( i * gOut + j, c ) = resized( i, j );
			}
		}
	}
	return out;
}

template<typename T>
LoadReport load_pretrained_into( Model<T>& model, const WeightBundle& bundle )
{
	LoadReport rep;
	rep.source_hash = bundle.hash;
	const ViTConfig& cfg = model.config();
	std::map<std::string, ag::Matrix<T>*> tensors;
	for( auto& [name, m] : model_tensors( model ) ) {
		tensors[name] = m;
	}
	std::vector<std::string> conflicts;
	std::map<std::string, const NamedArray*> accepted;
	std::map<std::string, ag::Matrix<double>> adapted;
	for( const auto& a : bundle.arrays ) {
		auto it = tensors.find( a.name );
		if( it == tensors.end() ) {
			rep.unexpected.push_back( a.name );
			continue;
		}
		ag::Matrix<T>& dst = *it->second;
		if( same_shape( a, dst.rows(), dst.cols() ) ) {
			accepted[a.name] = &a;
			continue;
		}
		if( a.shape.size() == 2 && a.shape[1] == static_cast<std::uint64_t>( dst.cols() ) ) {
			const auto rows = static_cast<Eigen::Index>( a.shape[0] );
			ag::Matrix<double> src( rows, dst.cols() );
			std::copy( a.values.begin(), a.values.end(), src.data() );
			if( a.name == "pos_embed" ) {
				// A leading class-token row is dropped before resizing.
				Eigen::Index start = 0;
				auto g = static_cast<int>( std::lround( std::sqrt( static_cast<double>( rows ) ) ) );
				if( static_cast<Eigen::Index>( g ) * g != rows ) {
					start = 1;
					g = static_cast<int>( std::lround( std::sqrt( static_cast<double>( rows - 1 ) ) ) );
				}
				if( static_cast<Eigen::Index>( g ) * g == rows - start ) {
					adapted[a.name] = resize_positions( src.bottomRows( rows - start ), g, cfg.grid() );
					continue;
				}
			}
			if( a.name == "patch_embed.weight" && rows == 3 * dst.rows() ) {
				// Rows are laid out (channel, py, px); channels collapse onto the single gray plane.
				adapted[a.name] = src.topRows( dst.rows() ) + src.middleRows( dst.rows(), dst.rows() ) + src.bottomRows( dst.rows() );
				continue;
			}
		}
		conflicts.push_back( a.name + " " + shape_text( a.shape ) + " vs model (" + std::to_string( dst.rows() ) + "," +
			std::to_string( dst.cols() ) + ")" );
	}
	if( !conflicts.empty() ) {
		std::string msg = "pretrained weights conflict with the model:";
		for( const auto& c : conflicts ) {
			msg += " [" + c + "]";
		}
		throw LoadError( msg );
	}
	for( auto& [name, dst] : tensors ) {
		if( auto a = accepted.find( name ); a != accepted.end() ) {
			copy_into( *dst, *a->second );
			rep.loaded.push_back( name );
		} else if( auto m = adapted.find( name ); m != adapted.end() ) {
			*dst = m->second.template cast<T>();
			rep.adapted.push_back( name );
		} else {
			rep.initialized.push_back( name );
		}
	}
	return rep;
}

template<typename T>
std::pair<Model<T>, LoadReport> load_pretrained( const std::string& source, const ViTConfig& cfg )
{
	const WeightBundle bundle = read_bundle( source );
	ViTConfig c = cfg;
	c.pretrained = source;
	Model<T> model( c );
	LoadReport rep = load_pretrained_into( model, bundle );
	return { std::move( model ), std::move( rep ) };
}

#define PROVIT_INSTANTIATE_WEIGHTS( T )                                                                  \
	template WeightBundle bundle_from_model<T>( Model<T>& );                                            \
	template void load_into_model<T>( Model<T>&, const WeightBundle& );                                 \
	template Model<T> model_from_bundle<T>( const WeightBundle& );                                      \
	template LoadReport load_pretrained_into<T>( Model<T>&, const WeightBundle& );                      \
	template std::pair<Model<T>, LoadReport> load_pretrained<T>( const std::string&, const ViTConfig& );

PROVIT_INSTANTIATE_WEIGHTS( float )
PROVIT_INSTANTIATE_WEIGHTS( double )

} // namespace provit
