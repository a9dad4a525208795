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

#include "provit/training.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <random>

#include "provit/error.hpp"
#include "provit/preprocess.hpp"

namespace provit {

namespace fs = std::filesystem;

template<typename T>
ag::Var<T> seg_loss( const ag::Var<T>& probs, std::span<const std::uint8_t> labels, T diceEps )
{
	const Eigen::Index n = probs.rows();
	if( probs.cols() != 4 || static_cast<std::size_t>( n ) != labels.size() ) {
		throw ArgumentError( "seg_loss: probabilities are " + std::to_string( probs.rows() ) + "x" + std::to_string( probs.cols() ) +
			" but " + std::to_string( labels.size() ) + " labels were given" );
	}
	const T clampAt = T( 1e-6 );
	const auto& p = probs.value();
	T ce = 0;
	T inter[4] = {}, sumP[4] = {}, sumY[4] = {};
	for( Eigen::Index i = 0; i < n; ++i ) {
		const int y = labels[i];
		if( y > 3 ) {
			throw ArgumentError( "seg_loss: label " + std::to_string( y ) + " outside 0..3" );
		}
		ce -= std::log( std::max( p( i, y ), clampAt ) );
		for( int c = 1; c < 4; ++c ) {
			sumP[c] += p( i, c );
		}
		inter[y] += p( i, y );
		sumY[y] += 1;
	}
	ce /= static_cast<T>( n );
	T num[4] = {}, den[4] = {}, diceMean = 0;
	for( int c = 1; c < 4; ++c ) {
		num[c] = 2 * inter[c] + diceEps;
		den[c] = sumP[c] + sumY[c] + diceEps;
		diceMean += num[c] / den[c];
	}
	diceMean /= 3;
	ag::Matrix<T> value( 1, 1 );
	value( 0, 0 ) = ce + 1 - diceMean;
	std::vector<std::uint8_t> lab( labels.begin(), labels.end() );
	return ag::custom_op<T>( std::move( value ), { probs }, [probs, lab = std::move( lab ), clampAt, num = std::array<T, 4>{ num[0], num[1], num[2], num[3] },
		den = std::array<T, 4>{ den[0], den[1], den[2], den[3] }]( const ag::Matrix<T>& g ) {
		const auto& p = probs.value();
		const Eigen::Index n = p.rows();
		const T scale = g( 0, 0 );
		ag::Matrix<T> d = ag::Matrix<T>::Zero( n, 4 );
		const T invN = T( 1 ) / static_cast<T>( n );
		for( Eigen::Index i = 0; i < n; ++i ) {
			const int y = lab[i];
			if( p( i, y ) > clampAt ) {
				d( i, y ) -= invN / p( i, y );
			}
			for( int c = 1; c < 4; ++c ) {
				const T dNum = y == c ? T( 2 ) : T( 0 );
				d( i, c ) -= ( dNum * den[c] - num[c] ) / ( den[c] * den[c] ) / T( 3 );
			}
		}
		probs.node()->accumulate( d * scale );
	} );
}

double seg_loss_value( const ag::Matrix<double>& probs, std::span<const std::uint8_t> labels, double diceEps )
{
	ag::NoGradGuard guard;
	return seg_loss<double>( ag::constant<double>( probs ), labels, diceEps ).item();
}

std::vector<std::uint8_t> interior_labels( const Plane<std::uint8_t>& plane, int rim )
{
	const auto r = static_cast<std::size_t>( rim );
	if( plane.height <= 2 * r || plane.width <= 2 * r ) {
		throw ArgumentError( "interior_labels: plane smaller than its rim" );
	}
	std::vector<std::uint8_t> out;
	out.reserve( ( plane.height - 2 * r ) * ( plane.width - 2 * r ) );
	for( std::size_t y = r; y < plane.height - r; ++y ) {
		for( std::size_t x = r; x < plane.width - r; ++x ) {
			out.push_back( plane.at( y, x ) );
		}
	}
	return out;
}

template<typename T>
SampleLosses<T> sample_losses( Model<T>& model, const std::vector<SliceStack>& stacks, const Plane<std::uint8_t>& labelPlane,
	const PairSet* pairs, double margin )
{
	const ViTConfig& cfg = model.config();
	if( stacks.size() != cfg.sequences.size() ) {
		throw ArgumentError( "sample_losses: expected one stack per model sequence" );
	}
	const std::vector<std::uint8_t> labels = interior_labels( labelPlane, cfg.rim() );
	const bool usePairs = pairs != nullptr && !pairs->empty() && model.head() != nullptr;
	const bool fusionHead = cfg.sequences.size() > 1 && cfg.fusion == FusionMode::Features;
	SampleLosses<T> out;
	std::vector<ag::Var<T>> segs;
	std::vector<ag::Var<T>> pairTerms;
	std::vector<std::pair<SequenceTag, ag::Var<T>>> centers;
	for( std::size_t s = 0; s < stacks.size(); ++s ) {
		const SequenceTag tag = cfg.sequences[s];
		ag::Var<T> center = model.center_tokens( model.encode( model.tokenize( stacks[s] ) ) );
		segs.push_back( seg_loss( ag::softmax_rows( model.decode_logits( center, tag ) ), labels ) );
		if( usePairs ) {
			const ag::Var<T> z = model.head()->forward( center, model.training() ).embedding;
			std::size_t count = 0;
			pairTerms.push_back( contrastive_loss_sum( *pairs, z, static_cast<T>( margin ), &count ) );
			out.pair_terms += count;
		}
		centers.emplace_back( tag, center );
	}
	if( fusionHead ) {
		segs.push_back( seg_loss( ag::softmax_rows( model.fusion_logits( centers ) ), labels ) );
	}
	out.seg = ag::add_scalars( segs, std::vector<T>( segs.size(), T( 1 ) / static_cast<T>( segs.size() ) ) );
	if( usePairs ) {
		out.contrastive_sum = ag::add_scalars( pairTerms, std::vector<T>( pairTerms.size(), T( 1 ) ) );
	}
	return out;
}

template<typename T>
ag::Var<T> sample_objective( const SampleLosses<T>& s, double alpha, std::size_t batchSize, std::size_t batchPairTerms )
{
	if( batchSize == 0 ) {
		throw ArgumentError( "sample_objective: empty batch" );
	}
	std::vector<ag::Var<T>> parts{ s.seg };
	std::vector<T> weights{ static_cast<T>( ( 1.0 - alpha ) / static_cast<double>( batchSize ) ) };
	if( s.contrastive_sum && batchPairTerms > 0 && alpha > 0.0 ) {
		parts.push_back( s.contrastive_sum );
		weights.push_back( static_cast<T>( alpha / static_cast<double>( batchPairTerms ) ) );
	}
	return ag::add_scalars( parts, weights );
}

template<typename T>
Adam<T>::Adam( ParameterStore<T>& store, double baseLr, double backboneMult, double weightDecay, double beta1, double beta2, double eps ) :
	baseLr_( baseLr ),
	backboneMult_( backboneMult ),
	weightDecay_( weightDecay ),
	beta1_( beta1 ),
	beta2_( beta2 ),
	eps_( eps )
{
	for( auto& p : store.all() ) {
		if( p.var.requires_grad() ) {
			Slot s{ p.name, p.var, p.group, ag::Matrix<T>::Zero( p.var.rows(), p.var.cols() ), ag::Matrix<T>::Zero( p.var.rows(), p.var.cols() ) };
			slots_.push_back( std::move( s ) );
		}
	}
}

template<typename T>
std::vector<ParamGroupInfo> Adam<T>::groups() const
{
	std::vector<ParamGroupInfo> out;
	for( const auto& s : slots_ ) {
		out.push_back( { s.name, s.group, s.group == ParamGroup::Backbone ? baseLr_ * backboneMult_ : baseLr_ } );
	}
	return out;
}

template<typename T>
void Adam<T>::step()
{
	++t_;
	const T b1 = static_cast<T>( beta1_ ), b2 = static_cast<T>( beta2_ );
	const T c1 = static_cast<T>( 1.0 - std::pow( beta1_, static_cast<double>( t_ ) ) );
	const T c2 = static_cast<T>( 1.0 - std::pow( beta2_, static_cast<double>( t_ ) ) );
	const T wd = static_cast<T>( weightDecay_ ), eps = static_cast<T>( eps_ );
	for( auto& s : slots_ ) {
		auto& node = *s.var.node();
		if( node.grad.size() == 0 ) {
			continue;
		}
		const T lr = static_cast<T>( s.group == ParamGroup::Backbone ? baseLr_ * backboneMult_ : baseLr_ );
		ag::Matrix<T> g = node.grad + wd * node.value;
		s.m = b1 * s.m + ( T( 1 ) - b1 ) * g;
		s.v = b2 * s.v + ( T( 1 ) - b2 ) * g.cwiseProduct( g );
		node.value.array() -= lr * ( s.m.array() / c1 ) / ( ( s.v.array() / c2 ).sqrt() + eps );
		node.zero_grad();
	}
}

void TrainConfig::validate() const
{
	auto fail = [] ( const std::string& field, const std::string& m ) { throw ConfigError( "train config: " + m, "/" + field ); };
	if( !( base_lr > 0 ) ) {
		fail( "base_lr", "base_lr must be positive" );
	}
	if( !( backbone_lr_mult > 0 ) ) {
		fail( "backbone_lr_mult", "backbone_lr_mult must be positive" );
	}
	if( !( weight_decay >= 0 ) ) {
		fail( "weight_decay", "weight_decay must be non-negative" );
	}
	if( !( alpha >= 0 && alpha <= 1 ) ) {
		fail( "alpha", "alpha must lie in [0, 1]" );
	}
	if( batch_size < 1 ) {
		fail( "batch_size", "batch_size must be positive" );
	}
	if( epochs < 1 ) {
		fail( "epochs", "epochs must be positive" );
	}
	if( max_steps && *max_steps < 1 ) {
		fail( "max_steps", "max_steps must be positive" );
	}
	if( !( val_fraction >= 0 && val_fraction < 1 ) ) {
		fail( "val_fraction", "val_fraction must lie in [0, 1)" );
	}
	if( validate_every < 0 ) {
		fail( "validate_every", "validate_every must be non-negative" );
	}
	if( threads < 1 ) {
		fail( "threads", "threads must be positive" );
	}
	if( lora_rank < 1 ) {
		fail( "lora_rank", "lora_rank must be positive" );
	}
	try {
		contrastive.validate();
	} catch( const ArgumentError& e ) {
		fail( "contrastive", e.what() );
	}
	try {
		effective_model().validate();
	} catch( const ConfigError& e ) {
		throw e.under( "model" );
	}
}

ViTConfig TrainConfig::effective_model() const
{
	ViTConfig m = model;
	m.use_axial_embed = flags.axial_embed;
	m.lora.reset();
	if( flags.lora_frozen ) {
		m.lora = LoRAConfig{ lora_rank, 1.0, true };
	}
	m.projection_head = flags.contrastive;
	if( !flags.pretrained ) {
		m.pretrained.clear();
	}
	m.seed = seed;
	return m;
}

nlohmann::json to_json( const TrainConfig& cfg )
{
	nlohmann::json j;
	j["base_lr"] = cfg.base_lr;
	j["weight_decay"] = cfg.weight_decay;
	j["backbone_lr_mult"] = cfg.backbone_lr_mult;
	j["batch_size"] = cfg.batch_size;
	j["epochs"] = cfg.epochs;
	j["max_steps"] = cfg.max_steps ? nlohmann::json( *cfg.max_steps ) : nlohmann::json( nullptr );
	j["alpha"] = cfg.alpha;
	j["seed"] = cfg.seed;
	j["val_fraction"] = cfg.val_fraction;
	j["validate_every"] = cfg.validate_every;
	j["eval_mode"] = cfg.eval_mode == CancerDefinition::CsPCaOnly ? "cspca" : "all_cancer";
	j["contrastive"] = { { "tau", cfg.contrastive.tau }, { "margin", cfg.contrastive.margin },
		{ "exclusion_radius", cfg.contrastive.exclusion_radius }, { "balance", cfg.contrastive.balance },
		{ "cancer", cfg.contrastive.cancer == CancerDefinition::CsPCaOnly ? "cspca" : "all_cancer" },
		{ "normal_positives", cfg.contrastive.normal_positives } };
	j["flags"] = { { "pretrained", cfg.flags.pretrained }, { "lora_frozen", cfg.flags.lora_frozen },
		{ "axial_embed", cfg.flags.axial_embed }, { "contrastive", cfg.flags.contrastive } };
	j["model"] = to_json( cfg.model );
	j["lora_rank"] = cfg.lora_rank;
	j["output_dir"] = cfg.output_dir;
	j["threads"] = cfg.threads;
	return j;
}

namespace {

CancerDefinition parse_cancer( const std::string& s )
{
	if( s == "cspca" ) {
		return CancerDefinition::CsPCaOnly;
	}
	if( s == "all_cancer" ) {
		return CancerDefinition::AllCancer;
	}
	throw ConfigError( "unknown cancer definition '" + s + "'" );
}

} // namespace

TrainConfig train_config_from_json( const nlohmann::json& j )
{
	if( !j.is_object() ) {
		throw ConfigError( "train config must be a JSON object", "" );
	}
	auto requireObject = [] ( const nlohmann::json& v, const std::string& at ) {
		if( !v.is_object() ) {
			throw ConfigError( "expected an object", at );
		}
	};
	TrainConfig c;
	for( const auto& [key, v] : j.items() ) {
		const std::string at = "/" + key;
		std::string inner = at;
		try {
			if( key == "base_lr" ) c.base_lr = v.get<double>();
			else if( key == "weight_decay" ) c.weight_decay = v.get<double>();
			else if( key == "backbone_lr_mult" ) c.backbone_lr_mult = v.get<double>();
			else if( key == "batch_size" ) c.batch_size = v.get<int>();
			else if( key == "epochs" ) c.epochs = v.get<int>();
			else if( key == "max_steps" ) {
				if( v.is_null() ) c.max_steps.reset();
				else c.max_steps = v.get<int>();
			}
			else if( key == "alpha" ) c.alpha = v.get<double>();
			else if( key == "seed" ) c.seed = v.get<std::uint64_t>();
			else if( key == "val_fraction" ) c.val_fraction = v.get<double>();
			else if( key == "validate_every" ) c.validate_every = v.get<int>();
			else if( key == "eval_mode" ) c.eval_mode = parse_cancer( v.get<std::string>() );
			else if( key == "contrastive" ) {
				requireObject( v, at );
				for( const auto& [k2, v2] : v.items() ) {
					inner = at + "/" + k2;
					if( k2 == "tau" ) c.contrastive.tau = v2.get<double>();
					else if( k2 == "margin" ) c.contrastive.margin = v2.get<double>();
					else if( k2 == "exclusion_radius" ) c.contrastive.exclusion_radius = v2.get<int>();
					else if( k2 == "balance" ) c.contrastive.balance = v2.get<double>();
					else if( k2 == "cancer" ) c.contrastive.cancer = parse_cancer( v2.get<std::string>() );
					else if( k2 == "normal_positives" ) c.contrastive.normal_positives = v2.get<bool>();
					else throw ConfigError( "unknown key", inner );
				}
			}
			else if( key == "flags" ) {
				requireObject( v, at );
				for( const auto& [k2, v2] : v.items() ) {
					inner = at + "/" + k2;
					if( k2 == "pretrained" ) c.flags.pretrained = v2.get<bool>();
					else if( k2 == "lora_frozen" ) c.flags.lora_frozen = v2.get<bool>();
					else if( k2 == "axial_embed" ) c.flags.axial_embed = v2.get<bool>();
					else if( k2 == "contrastive" ) c.flags.contrastive = v2.get<bool>();
					else throw ConfigError( "unknown key", inner );
				}
			}
			else if( key == "model" ) {
				try {
					c.model = vit_config_from_json( v );
				} catch( const ConfigError& e ) {
					throw e.under( "model" );
				}
			}
			else if( key == "lora_rank" ) c.lora_rank = v.get<int>();
			else if( key == "output_dir" ) c.output_dir = v.get<std::string>();
			else if( key == "threads" ) c.threads = v.get<int>();
			else throw ConfigError( "unknown key", at );
		} catch( const nlohmann::json::exception& e ) {
			throw ConfigError( e.what(), inner );
		} catch( const ConfigError& e ) {
			if( e.pointer().empty() ) {
				throw ConfigError( e.message(), inner );
			}
			throw;
		}
	}
	c.validate();
	return c;
}

nlohmann::json CheckpointRecord::to_json() const
{
	return { { "epoch", epoch }, { "step", step }, { "weights", weights_path }, { "metric", metric }, { "metric_source", metric_source },
		{ "config_hash", config_hash }, { "mean_train_loss", mean_train_loss } };
}

std::size_t select_best_checkpoint( const std::vector<CheckpointRecord>& records )
{
	if( records.empty() ) {
		throw ArgumentError( "no checkpoints to select from" );
	}
	std::size_t best = 0;
	for( std::size_t i = 1; i < records.size(); ++i ) {
		if( records[i].metric > records[best].metric ) {
			best = i;
		}
	}
	return best;
}

std::vector<PreparedCase> prepare_cases( const Manifest& manifest, const std::vector<SequenceTag>& sequences )
{
	std::vector<PreparedCase> out;
	for( const auto& rec : manifest.cases ) {
		LoadedCase loaded = load_case( manifest, rec, sequences );
		PreprocessedCase pre = preprocess_case( loaded.sequences, loaded.labels );
		out.push_back( { rec, std::move( pre.sequences ), std::move( pre.labels ) } );
	}
	return out;
}

std::vector<PreparedCase> prepare_cohort( const Cohort& cohort, const std::vector<SequenceTag>& sequences )
{
	std::vector<PreparedCase> out;
	for( std::size_t i = 0; i < cohort.specs.size(); ++i ) {
		PhantomCase pc = generate_case( cohort.specs[i], cohort.case_ids[i] );
		std::vector<Volume> vols;
		for( SequenceTag tag : sequences ) {
			auto it = pc.volumes.find( tag );
			if( it == pc.volumes.end() ) {
				throw ArgumentError( "phantom case lacks sequence " + std::string( sequence_name( tag ) ) );
			}
			vols.push_back( std::move( it->second ) );
		}
		PreprocessedCase pre = preprocess_case( vols, pc.labels );
		out.push_back( { pc.record, std::move( pre.sequences ), std::move( pre.labels ) } );
	}
	return out;
}

namespace {

Plane<std::uint8_t> label_plane( const LabelVolume& labels, std::size_t z )
{
	Plane<std::uint8_t> p( labels.shape.ny, labels.shape.nx );
	const auto src = labels.slice( z );
	std::copy( src.begin(), src.end(), p.data.begin() );
	return p;
}

bool slice_has( const LabelVolume& labels, std::size_t z, std::uint8_t minLabel, std::uint8_t maxLabel )
{
	for( std::uint8_t v : labels.slice( z ) ) {
		if( v >= minLabel && v <= maxLabel ) {
			return true;
		}
	}
	return false;
}

std::vector<bool> gland_slices( const LabelVolume& labels )
{
	std::vector<bool> m( labels.shape.nz );
	for( std::size_t z = 0; z < labels.shape.nz; ++z ) {
		m[z] = slice_has( labels, z, kGland, kCsPCa );
	}
	return m;
}

} // namespace

CohortEvaluation evaluate_cohort( Model<float>& model, const std::vector<PreparedCase>& cases, CancerDefinition mode, bool glandOnly, int threads )
{
	CohortEvaluation out;
	double diceSum = 0.0;
	std::size_t diceN = 0;
	for( const auto& c : cases ) {
		const std::vector<bool> mask = gland_slices( c.labels );
		const ProbabilityVolumes probs = predict_volume( model, c.sequences, threads, glandOnly ? &mask : nullptr );
		CaseEvaluation ev = evaluate_case( c.labels, probs, mode, c.record );
		out.records.insert( out.records.end(), ev.records.begin(), ev.records.end() );
		if( ev.has_cancer ) {
			diceSum += ev.dice.value;
			++diceN;
		}
		out.cases.push_back( std::move( ev ) );
	}
	try {
		out.patient_auroc = patient_auroc( out.records );
	} catch( const UndefinedMetricError& ) {
	}
	std::vector<double> s;
	std::vector<std::uint8_t> l;
	for( const auto& r : out.records ) {
		s.push_back( r.score );
		l.push_back( r.kind == RecordKind::Positive );
	}
	try {
		out.pooled_auroc = auroc( s, l );
	} catch( const UndefinedMetricError& ) {
	}
	if( diceN > 0 ) {
		out.mean_dice = diceSum / static_cast<double>( diceN );
	}
	return out;
}

void write_history_csv( const std::vector<HistoryRow>& history, const std::string& path )
{
	std::ofstream out( path );
	if( !out ) {
		throw IoError( "cannot write '" + path + "'" );
	}
	out.precision( 17 );
	out << "step,seg_loss,contrastive_loss,total\n";
	for( const auto& h : history ) {
		out << h.step << ',' << h.seg_loss << ',' << h.contrastive_loss << ',' << h.total << '\n';
	}
}

namespace {

void write_json( const nlohmann::json& j, const fs::path& path )
{
	std::ofstream out( path );
	if( !out ) {
		throw IoError( "cannot write '" + path.string() + "'" );
	}
	out << j.dump( 2 ) << '\n';
}

struct Sample {
	std::size_t c;
	std::size_t z;
};

} // namespace

TrainResult train( const std::vector<PreparedCase>& cases, const TrainConfig& cfg, const StepCallback& onStep )
{
	cfg.validate();
	TrainResult res;
	if( cases.empty() ) {
		throw ConfigError( "training split is empty" );
	}
	std::vector<std::size_t> order( cases.size() );
	std::iota( order.begin(), order.end(), 0 );
	std::mt19937_64 splitRng( derive_seed( cfg.seed, 0x73706c6974ULL ) );
	std::shuffle( order.begin(), order.end(), splitRng );
	std::size_t nVal = 0;
	if( cfg.val_fraction > 0 ) {
		nVal = std::max<std::size_t>( 1, static_cast<std::size_t>( std::lround( cfg.val_fraction * static_cast<double>( cases.size() ) ) ) );
	}
	if( nVal >= cases.size() ) {
		throw ConfigError( "training split is empty (" + std::to_string( cases.size() ) + " cases, " + std::to_string( nVal ) + " held out)" );
	}
	std::vector<std::size_t> valIdx( order.begin(), order.begin() + static_cast<long>( nVal ) );
	std::vector<std::size_t> trainIdx( order.begin() + static_cast<long>( nVal ), order.end() );
	std::sort( valIdx.begin(), valIdx.end() );
	std::sort( trainIdx.begin(), trainIdx.end() );
	std::vector<PreparedCase> evalCases;
	for( std::size_t i : trainIdx ) {
		res.train_cases.push_back( cases[i].record.case_id );
	}
	for( std::size_t i : valIdx ) {
		res.val_cases.push_back( cases[i].record.case_id );
	}
	// Without a held-out split the training cases are evaluated instead.
	for( std::size_t i : ( valIdx.empty() ? trainIdx : valIdx ) ) {
		evalCases.push_back( cases[i] );
	}

	const ViTConfig mc = cfg.effective_model();
	for( const auto& c : cases ) {
		if( c.sequences.size() != mc.sequences.size() ) {
			throw ArgumentError( "case " + c.record.case_id + " does not carry the model's sequences" );
		}
	}
	std::optional<Model<float>> modelHolder;
	if( cfg.flags.pretrained && !mc.pretrained.empty() ) {
		auto [m, rep] = load_pretrained<float>( mc.pretrained, mc );
		modelHolder.emplace( std::move( m ) );
		res.pretrained_report = std::move( rep );
	} else {
		if( cfg.flags.pretrained ) {
			res.warnings.push_back( "no pretrained weight source configured; the backbone starts from seeded random initialization" );
		}
		modelHolder.emplace( mc );
	}
	Model<float>& model = *modelHolder;
	model.set_training( true );
	Adam<float> opt( model.params(), cfg.base_lr, cfg.backbone_lr_mult, cfg.weight_decay );

	std::vector<Sample> all, cancer;
	const std::uint8_t cancerMin = cfg.contrastive.cancer == CancerDefinition::CsPCaOnly ? kCsPCa : kIndolent;
	for( std::size_t i : trainIdx ) {
		for( std::size_t z = 0; z < cases[i].labels.shape.nz; ++z ) {
			all.push_back( { i, z } );
			if( slice_has( cases[i].labels, z, cancerMin, kCsPCa ) ) {
				cancer.push_back( { i, z } );
			}
		}
	}
	const std::size_t batch = static_cast<std::size_t>( cfg.batch_size );
	const int stepsPerEpoch = static_cast<int>( ( all.size() + batch - 1 ) / batch );
	const int totalSteps = cfg.max_steps ? *cfg.max_steps : cfg.epochs * stepsPerEpoch;
	const double alpha = cfg.effective_alpha();
	const std::size_t nSeq = mc.sequences.size();

	fs::path outDir;
	if( !cfg.output_dir.empty() ) {
		outDir = cfg.output_dir;
		fs::create_directories( outDir / "checkpoints" );
		write_json( to_json( cfg ), outDir / "train_config.json" );
	}
	const std::string cfgHash = config_hash( model.config() );

	auto dump_state = [&] ( int step, const std::string& why ) {
		if( outDir.empty() ) {
			return std::string( "(no output directory)" );
		}
		const fs::path dir = outDir / "abort";
		fs::create_directories( dir );
		WeightBundle b = bundle_from_model( model );
		write_bundle( b, ( dir / "weights.pvtw" ).string() );
		write_history_csv( res.history, ( dir / "history.csv" ).string() );
		write_json( { { "step", step }, { "reason", why }, { "config", to_json( cfg ) } }, dir / "state.json" );
		return dir.string();
	};

	bool haveBest = false;
	double epochLoss = 0.0;
	int epochSteps = 0;
	for( int step = 1; step <= totalSteps; ++step ) {
		const int epoch = ( step - 1 ) / stepsPerEpoch + 1;
		std::mt19937_64 rng( derive_seed( cfg.seed, static_cast<std::uint64_t>( step ) ) );
		std::vector<Sample> picks;
		for( std::size_t b = 0; b < batch; ++b ) {
			const std::size_t k = static_cast<std::size_t>( step - 1 ) * batch + b;
			const auto& pool = ( k % 2 == 0 && !cancer.empty() ) ? cancer : all;
			picks.push_back( pool[std::uniform_int_distribution<std::size_t>( 0, pool.size() - 1 )( rng )] );
		}
		std::vector<Plane<std::uint8_t>> planes;
		std::vector<PairSet> pairs( batch );
		std::size_t batchPairTerms = 0;
		for( std::size_t b = 0; b < batch; ++b ) {
			planes.push_back( label_plane( cases[picks[b].c].labels, picks[b].z ) );
			if( alpha > 0 ) {
				const PatchGrid grid = compute_patch_fractions( planes[b], mc.patch_size, cfg.contrastive.cancer, cfg.contrastive.tau );
				pairs[b] = sample_pairs( grid, cfg.contrastive, derive_seed( cfg.seed ^ 0x7061697273ULL, static_cast<std::uint64_t>( step ) * batch + b ) );
				res.pairs_requested += pairs[b].size();
				batchPairTerms += pairs[b].size() * nSeq;
			}
		}
		double segSum = 0.0, pairSum = 0.0;
		for( std::size_t b = 0; b < batch; ++b ) {
			std::vector<SliceStack> stacks;
			for( const Volume& v : cases[picks[b].c].sequences ) {
				stacks.push_back( slice_window( v, picks[b].z ) );
			}
			SampleLosses<float> s;
			ag::Var<float> obj;
			try {
				s = sample_losses( model, stacks, planes[b], alpha > 0 ? &pairs[b] : nullptr, cfg.contrastive.margin );
				obj = sample_objective( s, alpha, batch, batchPairTerms );
			} catch( const NumericError& e ) {
				const std::string where = dump_state( step, e.what() );
				throw NumericError( std::string( e.what() ) + " at step " + std::to_string( step ) + "; state dumped to " + where );
			}
			if( !std::isfinite( obj.item() ) ) {
				const std::string where = dump_state( step, "non-finite loss" );
				throw NumericError( "non-finite loss at step " + std::to_string( step ) + "; state dumped to " + where );
			}
			segSum += s.seg.item();
			if( s.contrastive_sum ) {
				pairSum += s.contrastive_sum.item();
			}
			ag::backward( obj );
		}
		opt.step();

		HistoryRow row;
		row.step = step;
		row.epoch = epoch;
		row.seg_loss = segSum / static_cast<double>( batch );
		row.contrastive_loss = batchPairTerms > 0 ? pairSum / static_cast<double>( batchPairTerms ) : 0.0;
		row.total = ( 1.0 - alpha ) * row.seg_loss + alpha * row.contrastive_loss;
		row.pairs = batchPairTerms / nSeq;
		res.history.push_back( row );
		epochLoss += row.total;
		++epochSteps;
		if( onStep ) {
			onStep( row );
		}

		const bool epochEnd = step % stepsPerEpoch == 0 || step == totalSteps;
		if( !epochEnd ) {
			continue;
		}
		const bool validateNow = step == totalSteps || ( cfg.validate_every > 0 && epoch % cfg.validate_every == 0 );
		if( validateNow ) {
			model.set_training( false );
			const CohortEvaluation ev = evaluate_cohort( model, evalCases, cfg.eval_mode, true, cfg.threads );
			model.set_training( true );
			CheckpointRecord rec;
			rec.epoch = epoch;
			rec.step = step;
			rec.config_hash = cfgHash;
			rec.mean_train_loss = epochLoss / std::max( 1, epochSteps );
			if( ev.patient_auroc ) {
				rec.metric = *ev.patient_auroc;
				rec.metric_source = "patient_auroc";
			} else if( ev.pooled_auroc ) {
				rec.metric = *ev.pooled_auroc;
				rec.metric_source = "pooled_auroc";
			} else {
				rec.metric = 0.5;
				rec.metric_source = "chance";
			}
			WeightBundle bundle = bundle_from_model( model );
			if( !outDir.empty() ) {
				char name[32];
				std::snprintf( name, sizeof( name ), "epoch_%04d", epoch );
				const fs::path w = outDir / "checkpoints" / ( std::string( name ) + ".pvtw" );
				write_bundle( bundle, w.string() );
				rec.weights_path = w.string();
				nlohmann::json side = rec.to_json();
				side["weights_hash"] = bundle.hash;
				write_json( side, outDir / "checkpoints" / ( std::string( name ) + ".json" ) );
			}
			if( !haveBest || rec.metric > res.best_record.metric ) {
				haveBest = true;
				res.best_record = rec;
				res.best = std::move( bundle );
				if( !outDir.empty() ) {
					write_bundle( res.best, ( outDir / "best.pvtw" ).string() );
					nlohmann::json side = rec.to_json();
					side["weights_hash"] = res.best.hash;
					write_json( side, outDir / "best.json" );
				}
			}
			res.checkpoints.push_back( rec );
		}
		epochLoss = 0.0;
		epochSteps = 0;
	}
	if( !outDir.empty() ) {
		write_history_csv( res.history, ( outDir / "history.csv" ).string() );
	}
	return res;
}

TrainResult train( const Manifest& manifest, const TrainConfig& cfg, const StepCallback& onStep )
{
	cfg.validate();
	if( manifest.cases.empty() ) {
		throw ConfigError( "manifest has no cases" );
	}
	return train( prepare_cases( manifest, cfg.model.sequences ), cfg, onStep );
}

std::vector<std::pair<std::string, AblationFlags>> ablation_matrix()
{
	return {
		{ "ViT", { false, false, false, false } },
		{ "DINOv2 ViT", { true, false, false, false } },
		{ "DINOv2 LoRA ViT", { true, true, false, false } },
		{ "ProViDNet", { true, false, true, false } },
		{ "ProViCNet (Ours)", { true, false, true, true } },
	};
}

std::vector<AblationRow> run_ablation_suite( const std::vector<PreparedCase>& cases, const TrainConfig& base, const StepCallback& onStep )
{
	std::vector<AblationRow> rows;
	int index = 0;
	for( const auto& [name, flags] : ablation_matrix() ) {
		TrainConfig cfg = base;
		cfg.flags = flags;
		if( !base.output_dir.empty() ) {
			cfg.output_dir = ( fs::path( base.output_dir ) / ( "row" + std::to_string( ++index ) ) ).string();
		}
		TrainResult res = train( cases, cfg, onStep );
		Model<float> model = model_from_bundle<float>( res.best );
		std::vector<PreparedCase> evalCases;
		const auto& ids = res.val_cases.empty() ? res.train_cases : res.val_cases;
		for( const auto& c : cases ) {
			if( std::find( ids.begin(), ids.end(), c.record.case_id ) != ids.end() ) {
				evalCases.push_back( c );
			}
		}
		const CohortEvaluation ev = evaluate_cohort( model, evalCases, cfg.eval_mode, true, cfg.threads );
		AblationRow row;
		row.name = name;
		row.flags = flags;
		row.auroc = ev.patient_auroc ? *ev.patient_auroc : ( ev.pooled_auroc ? *ev.pooled_auroc : 0.5 );
		double threshold = 0.5;
		try {
			threshold = select_threshold( ev.records );
		} catch( const UndefinedMetricError& ) {
		}
		const ConfusionMetrics cm = confusion_metrics( ev.records, threshold );
		row.sensitivity = cm.sensitivity;
		row.specificity = cm.specificity;
		for( const auto& p : model.params().all() ) {
			const auto n = static_cast<std::size_t>( p.var.rows() * p.var.cols() );
			row.total_parameters += n;
			if( p.var.requires_grad() ) {
				row.trainable_parameters += n;
				if( p.group == ParamGroup::Backbone ) {
					row.trainable_backbone += n;
				}
			}
		}
		rows.push_back( row );
	}
	return rows;
}

std::vector<AblationRow> run_ablation_suite( const Manifest& manifest, const TrainConfig& base, const StepCallback& onStep )
{
	return run_ablation_suite( prepare_cases( manifest, base.model.sequences ), base, onStep );
}

void write_ablation_csv( const std::vector<AblationRow>& rows, const std::string& path )
{
	std::ofstream out( path );
	if( !out ) {
		throw IoError( "cannot write '" + path + "'" );
	}
	auto opt = [] ( const std::optional<double>& v ) { return v ? std::to_string( *v ) : std::string(); };
	out << "model,pretrained,lora,axial_embed,contrastive,auroc,sensitivity,specificity,trainable_params,total_params,trainable_backbone_params\n";
	for( const auto& r : rows ) {
		out << '"' << r.name << "\"," << r.flags.pretrained << ',' << r.flags.lora_frozen << ',' << r.flags.axial_embed << ','
			<< r.flags.contrastive << ',' << std::to_string( r.auroc ) << ',' << opt( r.sensitivity ) << ',' << opt( r.specificity ) << ','
			<< r.trainable_parameters << ',' << r.total_parameters << ',' << r.trainable_backbone << '\n';
	}
}

#define PROVIT_INSTANTIATE_TRAINING( T )                                                                                             \
	template ag::Var<T> seg_loss<T>( const ag::Var<T>&, std::span<const std::uint8_t>, T );                                         \
	template SampleLosses<T> sample_losses<T>( Model<T>&, const std::vector<SliceStack>&, const Plane<std::uint8_t>&, const PairSet*, \
		double );                                                                                                                    \
	template ag::Var<T> sample_objective<T>( const SampleLosses<T>&, double, std::size_t, std::size_t );                            \
	template class Adam<T>;

PROVIT_INSTANTIATE_TRAINING( float )
PROVIT_INSTANTIATE_TRAINING( double )

} // namespace provit
