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

#include "provit/model.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <future>

#include "provit/error.hpp"
#include "provit/preprocess.hpp"
#include "provit/weights.hpp"

namespace provit {

namespace {

std::string name_of( SequenceTag tag )
{
	return sequence_name( tag );
}

} // namespace

ViTConfig ViTConfig::desk()
{
	return ViTConfig{};
}

ViTConfig ViTConfig::full()
{
	ViTConfig cfg;
	cfg.embed_dim = 384;
	cfg.depth = 12;
	cfg.heads = 6;
	cfg.decoder_channels = 32;
	cfg.head = ProjectionHeadConfig{};
	return cfg;
}

void ViTConfig::validate() const
{
	auto fail = [] ( const std::string& field, const std::string& msg ) { throw ConfigError( "model config: " + msg, "/" + field ); };
	if( patch_size < 2 || patch_size % 2 != 0 ) {
		fail( "patch_size", "patch_size must be even and at least 2" );
	}
	if( interior_hw <= 0 || interior_hw % patch_size != 0 ) {
		fail( "interior_hw", "interior_hw must be a positive multiple of patch_size" );
	}
	if( embed_dim <= 0 || heads <= 0 || embed_dim % heads != 0 ) {
		fail( "embed_dim", "embed_dim must be a positive multiple of heads" );
	}
	if( depth < 0 ) {
		fail( "depth", "depth must be non-negative" );
	}
	if( mlp_ratio < 1 ) {
		fail( "mlp_ratio", "mlp_ratio must be positive" );
	}
	if( decoder_channels < 1 ) {
		fail( "decoder_channels", "decoder_channels must be positive" );
	}
	if( n_slices != 1 && n_slices != 3 ) {
		fail( "n_slices", "n_slices must be 1 or 3" );
	}
	if( sequences.empty() ) {
		fail( "sequences", "at least one sequence is required" );
	}
	for( std::size_t i = 0; i < sequences.size(); ++i ) {
		for( std::size_t j = i + 1; j < sequences.size(); ++j ) {
			if( sequences[i] == sequences[j] ) {
				fail( "sequences", "duplicate sequence " + name_of( sequences[i] ) );
			}
		}
	}
	if( lora && ( lora->rank < 1 || lora->rank > embed_dim ) ) {
		fail( "lora/rank", "LoRA rank must lie in [1, embed_dim]" );
	}
	if( projection_head ) {
		if( head.input_dim != embed_dim ) {
			fail( "head/input_dim", "projection head input_dim must equal embed_dim" );
		}
		try {
			head.validate();
		} catch( const ArgumentError& e ) {
			fail( "head", e.what() );
		}
	}
}

nlohmann::json to_json( const ViTConfig& cfg )
{
	nlohmann::json j;
	j["patch_size"] = cfg.patch_size;
	j["embed_dim"] = cfg.embed_dim;
	j["depth"] = cfg.depth;
	j["heads"] = cfg.heads;
	j["mlp_ratio"] = cfg.mlp_ratio;
	j["interior_hw"] = cfg.interior_hw;
	j["n_slices"] = cfg.n_slices;
	j["decoder_channels"] = cfg.decoder_channels;
	j["use_axial_embed"] = cfg.use_axial_embed;
	if( cfg.lora ) {
		j["lora"] = { { "rank", cfg.lora->rank }, { "scale", cfg.lora->scale }, { "frozen_backbone", cfg.lora->frozen_backbone } };
	} else {
		j["lora"] = nullptr;
	}
	j["pretrained"] = cfg.pretrained;
	std::vector<std::string> seqs;
	for( SequenceTag t : cfg.sequences ) {
		seqs.push_back( name_of( t ) );
	}
	j["sequences"] = seqs;
	j["fusion"] = cfg.fusion == FusionMode::Features ? "features" : "probabilities";
	j["projection_head"] = cfg.projection_head;
	j["head"] = { { "input_dim", cfg.head.input_dim }, { "hidden_dim", cfg.head.hidden_dim },
		{ "bottleneck_dim", cfg.head.bottleneck_dim }, { "output_dim", cfg.head.output_dim } };
	j["seed"] = cfg.seed;
	return j;
}

ViTConfig vit_config_from_json( const nlohmann::json& j )
{
	if( !j.is_object() ) {
		throw ConfigError( "model config must be a JSON object", "" );
	}
	ViTConfig cfg;
	for( const auto& [key, value] : j.items() ) {
		const std::string at = "/" + key;
		try {
			if( key == "patch_size" ) cfg.patch_size = value.get<int>();
			else if( key == "embed_dim" ) cfg.embed_dim = value.get<int>();
			else if( key == "depth" ) cfg.depth = value.get<int>();
			else if( key == "heads" ) cfg.heads = value.get<int>();
			else if( key == "mlp_ratio" ) cfg.mlp_ratio = value.get<int>();
			else if( key == "interior_hw" ) cfg.interior_hw = value.get<int>();
			else if( key == "n_slices" ) cfg.n_slices = value.get<int>();
			else if( key == "decoder_channels" ) cfg.decoder_channels = value.get<int>();
			else if( key == "use_axial_embed" ) cfg.use_axial_embed = value.get<bool>();
			else if( key == "lora" ) {
				if( value.is_null() ) {
					cfg.lora.reset();
				} else {
					if( !value.is_object() ) {
						throw ConfigError( "lora must be an object or null", at );
					}
					LoRAConfig l;
					for( const auto& [k2, v2] : value.items() ) {
						if( k2 == "rank" ) l.rank = v2.get<int>();
						else if( k2 == "scale" ) l.scale = v2.get<double>();
						else if( k2 == "frozen_backbone" ) l.frozen_backbone = v2.get<bool>();
						else throw ConfigError( "unknown key", at + "/" + k2 );
					}
					cfg.lora = l;
				}
			}
			else if( key == "pretrained" ) cfg.pretrained = value.get<std::string>();
			else if( key == "sequences" ) {
				if( !value.is_array() ) {
					throw ConfigError( "sequences must be an array", at );
				}
				cfg.sequences.clear();
				for( const auto& s : value ) {
					try {
						cfg.sequences.push_back( parse_sequence( s.get<std::string>() ) );
					} catch( const Error& e ) {
						throw ConfigError( e.what(), at + "/" + std::to_string( cfg.sequences.size() ) );
					}
				}
			}
			else if( key == "fusion" ) {
				const auto f = value.get<std::string>();
				if( f == "features" ) cfg.fusion = FusionMode::Features;
				else if( f == "probabilities" ) cfg.fusion = FusionMode::Probabilities;
				else throw ConfigError( "unknown fusion mode '" + f + "'", at );
			}
			else if( key == "projection_head" ) cfg.projection_head = value.get<bool>();
			else if( key == "head" ) {
				if( !value.is_object() ) {
					throw ConfigError( "head must be an object", at );
				}
				for( const auto& [k2, v2] : value.items() ) {
					if( k2 == "input_dim" ) cfg.head.input_dim = v2.get<int>();
					else if( k2 == "hidden_dim" ) cfg.head.hidden_dim = v2.get<int>();
					else if( k2 == "bottleneck_dim" ) cfg.head.bottleneck_dim = v2.get<int>();
					else if( k2 == "output_dim" ) cfg.head.output_dim = v2.get<int>();
					else throw ConfigError( "unknown key", at + "/" + k2 );
				}
			}
			else if( key == "seed" ) cfg.seed = value.get<std::uint64_t>();
			else throw ConfigError( "unknown key", at );
		} catch( const nlohmann::json::exception& e ) {
			throw ConfigError( e.what(), at );
		}
	}
	cfg.validate();
	return cfg;
}

std::string config_hash( const ViTConfig& cfg )
{
	const std::string text = to_json( cfg ).dump();
	return hex64( fnv1a64( text.data(), text.size() ) );
}

bool is_backbone_parameter( const std::string& name )
{
	if( name.find( "lora" ) != std::string::npos ) {
		return false;
	}
	return name.rfind( "patch_embed.", 0 ) == 0 || name == "pos_embed" || name.rfind( "blocks.", 0 ) == 0 ||
		name.rfind( "norm.", 0 ) == 0;
}

namespace {

std::string decoder_key( SequenceTag tag )
{
	std::string s = name_of( tag );
	std::transform( s.begin(), s.end(), s.begin(), [] ( unsigned char c ) { return static_cast<char>( std::tolower( c ) ); } );
	return s;
}

std::string block_prefix( int i )
{
	return "blocks." + std::to_string( i ) + ".";
}

} // namespace

template<typename T>
Model<T>::Model( const ViTConfig& cfg ) :
	cfg_( cfg )
{
	cfg_.validate();
	std::mt19937_64 rng( cfg_.seed ^ 0x70726f766974ULL );
	const int d = cfg_.embed_dim;
	const int pp = cfg_.patch_size * cfg_.patch_size;
	const int hidden = d * cfg_.mlp_ratio;
	auto bb = ParamGroup::Backbone;

	params_.add( "patch_embed.weight", trunc_normal<T>( rng, pp, d, 0.02 ), bb );
	params_.add( "patch_embed.bias", ag::Matrix<T>::Zero( 1, d ), bb );
	params_.add( "pos_embed", trunc_normal<T>( rng, cfg_.tokens_per_slice(), d, 0.02 ), bb );
	for( int i = 0; i < cfg_.depth; ++i ) {
		const std::string b = block_prefix( i );
		params_.add( b + "norm1.weight", ag::Matrix<T>::Ones( 1, d ), bb );
		params_.add( b + "norm1.bias", ag::Matrix<T>::Zero( 1, d ), bb );
		for( const char* proj : { "q", "k", "v", "o" } ) {
			params_.add( b + "attn." + proj + ".weight", trunc_normal<T>( rng, d, d, 0.02 ), bb );
			params_.add( b + "attn." + proj + ".bias", ag::Matrix<T>::Zero( 1, d ), bb );
		}
		params_.add( b + "norm2.weight", ag::Matrix<T>::Ones( 1, d ), bb );
		params_.add( b + "norm2.bias", ag::Matrix<T>::Zero( 1, d ), bb );
		params_.add( b + "mlp.fc1.weight", trunc_normal<T>( rng, d, hidden, 0.02 ), bb );
		params_.add( b + "mlp.fc1.bias", ag::Matrix<T>::Zero( 1, hidden ), bb );
		params_.add( b + "mlp.fc2.weight", trunc_normal<T>( rng, hidden, d, 0.02 ), bb );
		params_.add( b + "mlp.fc2.bias", ag::Matrix<T>::Zero( 1, d ), bb );
	}
	params_.add( "norm.weight", ag::Matrix<T>::Ones( 1, d ), bb );
	params_.add( "norm.bias", ag::Matrix<T>::Zero( 1, d ), bb );

	// Axial embeddings start small and random so the three planes are distinguishable from the first step.
	if( cfg_.use_axial_embed && cfg_.n_slices > 1 ) {
		params_.add( "axial_embed", trunc_normal<T>( rng, cfg_.n_slices, d, 0.02 ), ParamGroup::Head );
	}
	for( SequenceTag tag : cfg_.sequences ) {
		init_decoder( decoder_key( tag ), d, rng );
	}
	if( cfg_.sequences.size() > 1 && cfg_.fusion == FusionMode::Features ) {
		init_decoder( "fusion", d * static_cast<int>( cfg_.sequences.size() ), rng );
	}
	if( cfg_.projection_head ) {
		head_.emplace( cfg_.head, params_, rng );
	}
	if( cfg_.lora ) {
		add_lora( *cfg_.lora );
	}
}

template<typename T>
void Model<T>::init_decoder( const std::string& name, int inputDim, std::mt19937_64& rng )
{
	const int c = cfg_.decoder_channels;
	const int k = cfg_.patch_size / 2;
	const std::string n = "decoder." + name + ".";
	params_.add( n + "up.weight", uniform_fan_in<T>( rng, inputDim, k * k * c, inputDim ), ParamGroup::Head );
	params_.add( n + "up.bias", ag::Matrix<T>::Zero( 1, c ), ParamGroup::Head );
	params_.add( n + "conv.weight", uniform_fan_in<T>( rng, 9 * c, c, 9 * c ), ParamGroup::Head );
	params_.add( n + "conv.bias", ag::Matrix<T>::Zero( 1, c ), ParamGroup::Head );
	params_.add( n + "out.weight", uniform_fan_in<T>( rng, c, 4, c ), ParamGroup::Head );
	params_.add( n + "out.bias", ag::Matrix<T>::Zero( 1, 4 ), ParamGroup::Head );
}

template<typename T>
std::vector<std::string> Model<T>::decoder_names() const
{
	std::vector<std::string> names;
	for( SequenceTag tag : cfg_.sequences ) {
		names.push_back( decoder_key( tag ) );
	}
	if( params_.contains( "decoder.fusion.up.weight" ) ) {
		names.push_back( "fusion" );
	}
	return names;
}

template<typename T>
void Model<T>::add_lora( const LoRAConfig& lora )
{
	if( loraRank_ > 0 ) {
		throw ArgumentError( "LoRA adapters are already attached" );
	}
	if( lora.rank < 1 || lora.rank > cfg_.embed_dim ) {
		throw ArgumentError( "LoRA rank " + std::to_string( lora.rank ) + " must lie in [1, " + std::to_string( cfg_.embed_dim ) + "]" );
	}
	std::mt19937_64 rng( cfg_.seed ^ 0x6c6f7261ULL );
	const int d = cfg_.embed_dim;
	for( int i = 0; i < cfg_.depth; ++i ) {
		for( const char* proj : { "q", "v" } ) {
			const std::string n = block_prefix( i ) + "attn." + proj + ".lora_";
			params_.add( n + "a", uniform_fan_in<T>( rng, lora.rank, d, d ), ParamGroup::Head );
			params_.add( n + "b", ag::Matrix<T>::Zero( d, lora.rank ), ParamGroup::Head );
		}
	}
	loraRank_ = lora.rank;
	loraScale_ = lora.scale;
	cfg_.lora = lora;
	if( lora.frozen_backbone ) {
		freeze_backbone();
	}
}

template<typename T>
void Model<T>::freeze_backbone()
{
	for( auto& prm : params_.all() ) {
		if( is_backbone_parameter( prm.name ) ) {
			params_.set_trainable( prm.name, false );
		}
	}
}

template<typename T>
ag::Matrix<T> Model<T>::patchify( const SliceStack& stack ) const
{
	const int hw = cfg_.input_hw();
	const int P = cfg_.patch_size;
	const int g = cfg_.grid();
	const int rim = cfg_.rim();
	for( const auto& s : stack.slices ) {
		if( static_cast<int>( s.height ) != hw || static_cast<int>( s.width ) != hw ) {
			throw ArgumentError( "slice stack planes must be " + std::to_string( hw ) + "x" + std::to_string( hw ) + ", got " +
				std::to_string( s.height ) + "x" + std::to_string( s.width ) );
		}
	}
	const int nz = cfg_.n_slices;
	const int first = nz == 3 ? 0 : 1;
	ag::Matrix<T> patches( nz * g * g, P * P );
	for( int z = 0; z < nz; ++z ) {
		const Plane<float>& plane = stack.slices[first + z];
		for( int i = 0; i < g; ++i ) {
			for( int j = 0; j < g; ++j ) {
				auto row = patches.row( ( z * g + i ) * g + j );
				for( int py = 0; py < P; ++py ) {
					const float* src = &plane.data[static_cast<std::size_t>( rim + i * P + py ) * hw + rim + j * P];
					for( int px = 0; px < P; ++px ) {
						row( py * P + px ) = static_cast<T>( src[px] );
					}
				}
			}
		}
	}
	return patches;
}

template<typename T>
ag::Var<T> Model<T>::tokenize( const SliceStack& stack )
{
	const int nz = cfg_.n_slices;
	const int tps = cfg_.tokens_per_slice();
	ag::Var<T> x = ag::linear( ag::constant<T>( patchify( stack ) ), p( "patch_embed.weight" ), p( "patch_embed.bias" ) );
	std::vector<int> posIdx( nz * tps );
	for( int r = 0; r < nz * tps; ++r ) {
		posIdx[r] = r % tps;
	}
	x = ag::add( x, ag::gather_rows( p( "pos_embed" ), std::span<const int>( posIdx ) ) );
	if( params_.contains( "axial_embed" ) ) {
		std::vector<int> axIdx( nz * tps );
		for( int r = 0; r < nz * tps; ++r ) {
			axIdx[r] = r / tps;
		}
		x = ag::add( x, ag::gather_rows( p( "axial_embed" ), std::span<const int>( axIdx ) ) );
	}
	return x;
}

namespace {

template<typename T>
void check_finite( const ag::Var<T>& x, const std::string& where )
{
	if( x.value().allFinite() ) {
		return;
	}
	Eigen::Index bad = 0;
	for( ; bad < x.value().size(); ++bad ) {
		if( !std::isfinite( static_cast<double>( x.value().data()[bad] ) ) ) {
			break;
		}
	}
	throw NumericError( "non-finite activation after " + where + " (token " + std::to_string( bad / x.cols() ) + ", feature " +
		std::to_string( bad % x.cols() ) + ")" );
}

} // namespace

template<typename T>
ag::Var<T> Model<T>::encode( const ag::Var<T>& tokens )
{
	if( tokens.cols() != cfg_.embed_dim || tokens.rows() != cfg_.n_slices * cfg_.tokens_per_slice() ) {
		throw ArgumentError( "encode: token matrix has the wrong shape" );
	}
	check_finite( tokens, "patch embedding" );
	ag::Var<T> x = tokens;
	const T loraScale = static_cast<T>( loraScale_ );
	for( int i = 0; i < cfg_.depth; ++i ) {
		const std::string b = block_prefix( i );
		ag::Var<T> h = ag::layer_norm( x, p( b + "norm1.weight" ), p( b + "norm1.bias" ) );
		auto proj = [&] ( const std::string& name ) {
			ag::Var<T> out = ag::linear( h, p( b + "attn." + name + ".weight" ), p( b + "attn." + name + ".bias" ) );
			if( loraRank_ > 0 && ( name == "q" || name == "v" ) ) {
				const std::string n = b + "attn." + name + ".lora_";
				ag::Var<T> delta = ag::matmul_nt( ag::matmul_nt( h, p( n + "a" ) ), p( n + "b" ) );
				out = ag::add( out, loraScale == T( 1 ) ? delta : ag::scale( delta, loraScale ) );
			}
			return out;
		};
		ag::Var<T> a = ag::attention( proj( "q" ), proj( "k" ), proj( "v" ), cfg_.heads );
		x = ag::add( x, ag::linear( a, p( b + "attn.o.weight" ), p( b + "attn.o.bias" ) ) );
		h = ag::layer_norm( x, p( b + "norm2.weight" ), p( b + "norm2.bias" ) );
		h = ag::linear( ag::gelu( ag::linear( h, p( b + "mlp.fc1.weight" ), p( b + "mlp.fc1.bias" ) ) ),
			p( b + "mlp.fc2.weight" ), p( b + "mlp.fc2.bias" ) );
		x = ag::add( x, h );
		check_finite( x, "block " + std::to_string( i ) );
	}
	// An empty stack passes tokens through untouched, final norm included.
	if( cfg_.depth == 0 ) {
		return x;
	}
	return ag::layer_norm( x, p( "norm.weight" ), p( "norm.bias" ) );
}

template<typename T>
ag::Var<T> Model<T>::center_tokens( const ag::Var<T>& features ) const
{
	const int tps = cfg_.tokens_per_slice();
	if( features.rows() != cfg_.n_slices * tps ) {
		throw ArgumentError( "center_tokens: feature matrix has the wrong number of rows" );
	}
	return ag::slice_rows( features, ( cfg_.n_slices / 2 ) * tps, tps );
}

template<typename T>
ag::Var<T> Model<T>::run_decoder( const std::string& name, const ag::Var<T>& x )
{
	const std::string n = "decoder." + name + ".";
	const int c = cfg_.decoder_channels;
	const int k = cfg_.patch_size / 2;
	const int g = cfg_.grid();
	if( x.rows() != g * g || x.cols() != p( n + "up.weight" ).rows() ) {
		throw ArgumentError( "decoder '" + name + "' received features of the wrong shape" );
	}
	ag::Var<T> img = ag::tokens_to_image( ag::linear( x, p( n + "up.weight" ), ag::Var<T>() ), g, k, c );
	img = ag::gelu( ag::add_row( img, p( n + "up.bias" ) ) );
	const int half = g * k;
	img = ag::upsample2x( img, half, half );
	img = ag::gelu( ag::conv3x3( img, 2 * half, 2 * half, p( n + "conv.weight" ), p( n + "conv.bias" ) ) );
	return ag::linear( img, p( n + "out.weight" ), p( n + "out.bias" ) );
}

template<typename T>
ag::Var<T> Model<T>::decode_logits( const ag::Var<T>& centerFeatures, SequenceTag sequence )
{
	if( std::find( cfg_.sequences.begin(), cfg_.sequences.end(), sequence ) == cfg_.sequences.end() ) {
		throw ArgumentError( "model has no decoder for sequence " + name_of( sequence ) );
	}
	return run_decoder( decoder_key( sequence ), centerFeatures );
}

namespace {

template<typename T>
void check_sequence_order( const std::vector<std::pair<SequenceTag, ag::Var<T>>>& features, const std::vector<SequenceTag>& order )
{
	for( SequenceTag tag : order ) {
		bool found = false;
		for( const auto& f : features ) {
			found = found || f.first == tag;
		}
		if( !found ) {
			throw ArgumentError( "fusion input is missing sequence " + name_of( tag ) );
		}
	}
	if( features.size() != order.size() ) {
		throw ArgumentError( "fusion input has " + std::to_string( features.size() ) + " sequences, expected " +
			std::to_string( order.size() ) );
	}
	for( std::size_t i = 0; i < order.size(); ++i ) {
		if( features[i].first != order[i] ) {
			throw ArgumentError( "fusion input order must be the model order; found " + name_of( features[i].first ) +
				" at position " + std::to_string( i ) + " where " + name_of( order[i] ) + " belongs" );
		}
	}
}

} // namespace

template<typename T>
ag::Var<T> Model<T>::fusion_logits( const std::vector<std::pair<SequenceTag, ag::Var<T>>>& centerFeatures )
{
	check_sequence_order( centerFeatures, cfg_.sequences );
	if( !params_.contains( "decoder.fusion.up.weight" ) ) {
		throw ArgumentError( "model has no feature-level fusion decoder" );
	}
	std::vector<ag::Var<T>> parts;
	for( const auto& f : centerFeatures ) {
		parts.push_back( f.second );
	}
	return run_decoder( "fusion", ag::concat_cols( parts ) );
}

template<typename T>
ag::Var<T> tokenize( const SliceStack& stack, Model<T>& model )
{
	return model.tokenize( stack );
}

template<typename T>
ag::Var<T> encode( const ag::Var<T>& tokens, Model<T>& model )
{
	return model.encode( tokens );
}

ProbabilityMap probability_map( const ag::Matrix<float>& interiorLogits, int interior, int rim )
{
	if( interiorLogits.rows() != static_cast<Eigen::Index>( interior ) * interior || interiorLogits.cols() != 4 ) {
		throw ArgumentError( "probability_map: logits shape mismatch" );
	}
	ProbabilityMap map;
	map.height = map.width = interior + 2 * rim;
	map.probs = ag::Matrix<float>::Zero( static_cast<Eigen::Index>( map.height ) * map.width, 4 );
	map.probs.col( 0 ).setOnes();
	for( int y = 0; y < interior; ++y ) {
		for( int x = 0; x < interior; ++x ) {
			const auto l = interiorLogits.row( y * interior + x );
			const float mx = l.maxCoeff();
			Eigen::Matrix<float, 1, 4> e = ( l.array() - mx ).exp().matrix();
			map.probs.row( ( y + rim ) * map.width + x + rim ) = e / e.sum();
		}
	}
	return map;
}

template<typename T>
ProbabilityMap decode_sequence( const ag::Var<T>& centerFeatures, Model<T>& model, SequenceTag sequence )
{
	ag::NoGradGuard guard;
	const ag::Var<T> logits = model.decode_logits( centerFeatures, sequence );
	return probability_map( logits.value().template cast<float>(), model.config().interior_hw, model.config().rim() );
}

template<typename T>
ProbabilityMap fuse_mpmri( const std::vector<std::pair<SequenceTag, ag::Var<T>>>& centerFeatures, Model<T>& model )
{
	ag::NoGradGuard guard;
	const ViTConfig& cfg = model.config();
	if( cfg.fusion == FusionMode::Features ) {
		const ag::Var<T> logits = model.fusion_logits( centerFeatures );
		return probability_map( logits.value().template cast<float>(), cfg.interior_hw, cfg.rim() );
	}
	check_sequence_order( centerFeatures, cfg.sequences );
	ProbabilityMap avg;
	for( const auto& f : centerFeatures ) {
		ProbabilityMap m = decode_sequence( f.second, model, f.first );
		if( avg.probs.size() == 0 ) {
			avg = std::move( m );
		} else {
			avg.probs += m.probs;
		}
	}
	avg.probs /= static_cast<float>( centerFeatures.size() );
	return avg;
}

template<typename T>
void apply_lora( Model<T>& model, const LoRAConfig& lora )
{
	model.add_lora( lora );
}

ProbabilityMap predict_slice( Model<float>& model, const std::vector<Volume>& sequences, std::size_t z )
{
	const ViTConfig& cfg = model.config();
	ag::NoGradGuard guard;
	std::vector<std::pair<SequenceTag, ag::Var<float>>> centers;
	for( std::size_t s = 0; s < sequences.size(); ++s ) {
		const SliceStack stack = slice_window( sequences[s], z );
		centers.emplace_back( cfg.sequences[s], model.center_tokens( model.encode( model.tokenize( stack ) ) ) );
	}
	if( centers.size() == 1 ) {
		return decode_sequence( centers[0].second, model, centers[0].first );
	}
	return fuse_mpmri( centers, model );
}

ProbabilityVolumes predict_volume( Model<float>& model, const std::vector<Volume>& sequences, int threads, const std::vector<bool>* slices )
{
	const ViTConfig& cfg = model.config();
	if( sequences.size() != cfg.sequences.size() ) {
		throw ArgumentError( "predict_volume: expected " + std::to_string( cfg.sequences.size() ) + " sequences, got " +
			std::to_string( sequences.size() ) );
	}
	for( std::size_t s = 0; s < sequences.size(); ++s ) {
		if( sequences[s].sequence != cfg.sequences[s] ) {
			throw ArgumentError( "predict_volume: sequence " + std::to_string( s ) + " is " + name_of( sequences[s].sequence ) +
				", expected " + name_of( cfg.sequences[s] ) );
		}
		if( sequences[s].shape != sequences[0].shape ) {
			throw ArgumentError( "predict_volume: sequences differ in shape" );
		}
	}
	const Shape3 shape = sequences[0].shape;
	if( static_cast<int>( shape.ny ) != cfg.input_hw() || static_cast<int>( shape.nx ) != cfg.input_hw() ) {
		throw ArgumentError( "predict_volume: in-plane size must be " + std::to_string( cfg.input_hw() ) );
	}
	const bool wasTraining = model.training();
	model.set_training( false );

	if( slices != nullptr && slices->size() != shape.nz ) {
		throw ArgumentError( "predict_volume: slice mask length differs from the slice count" );
	}
	ProbabilityVolumes out;
	Volume* dst[4] = { &out.background, &out.gland, &out.indolent, &out.cspca };
	for( Volume* v : dst ) {
		v->shape = shape;
		v->spacing = sequences[0].spacing;
		v->sequence = cfg.sequences[0];
		v->data.assign( shape.size(), v == dst[0] ? 1.0f : 0.0f );
	}
	std::vector<std::size_t> todo;
	for( std::size_t z = 0; z < shape.nz; ++z ) {
		if( slices == nullptr || ( *slices )[z] ) {
			todo.push_back( z );
		}
	}
	auto store = [&] ( std::size_t z, const ProbabilityMap& map ) {
		const std::size_t plane = shape.plane();
		for( int c = 0; c < 4; ++c ) {
			for( std::size_t i = 0; i < plane; ++i ) {
				dst[c]->data[z * plane + i] = map.probs( static_cast<Eigen::Index>( i ), c );
			}
		}
	};
	const std::size_t workers = static_cast<std::size_t>( std::max( 1, threads ) );
	if( workers == 1 ) {
		for( std::size_t z : todo ) {
			store( z, predict_slice( model, sequences, z ) );
		}
	} else {
		for( std::size_t start = 0; start < todo.size(); start += workers ) {
			std::vector<std::future<ProbabilityMap>> jobs;
			for( std::size_t k = start; k < std::min( todo.size(), start + workers ); ++k ) {
				const std::size_t z = todo[k];
				jobs.push_back( std::async( std::launch::async, [&model, &sequences, z] { return predict_slice( model, sequences, z ); } ) );
			}
			for( std::size_t k = 0; k < jobs.size(); ++k ) {
				store( todo[start + k], jobs[k].get() );
			}
		}
	}
	model.set_training( wasTraining );
	return out;
}

#define PROVIT_INSTANTIATE_MODEL( T )                                                                                               \
	template class Model<T>;                                                                                                       \
	template ag::Var<T> tokenize<T>( const SliceStack&, Model<T>& );                                                               \
	template ag::Var<T> encode<T>( const ag::Var<T>&, Model<T>& );                                                                 \
	template ProbabilityMap decode_sequence<T>( const ag::Var<T>&, Model<T>&, SequenceTag );                                       \
	template ProbabilityMap fuse_mpmri<T>( const std::vector<std::pair<SequenceTag, ag::Var<T>>>&, Model<T>& );                    \
	template void apply_lora<T>( Model<T>&, const LoRAConfig& );

PROVIT_INSTANTIATE_MODEL( float )
PROVIT_INSTANTIATE_MODEL( double )

} // namespace provit
