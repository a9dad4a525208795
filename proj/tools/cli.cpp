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

#include "cli.hpp"

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <iostream>
#include <map>
#include <optional>
#include <random>
#include <sstream>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "provit/error.hpp"
#include "provit/evaluation.hpp"
#include "provit/features.hpp"
#include "provit/manifest.hpp"
#include "provit/model.hpp"
#include "provit/nifti.hpp"
#include "provit/phantom.hpp"
#include "provit/png.hpp"
#include "provit/preprocess.hpp"
#include "provit/screening.hpp"
#include "provit/training.hpp"
#include "provit/weights.hpp"

namespace provit::cli {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr int kSchemaVersion = 1;
constexpr const char* kResolvedConfigName = "resolved_config.json";
constexpr const char* kOutputsName = "outputs.json";

// Raised for bad invocations that are not config-schema problems (missing files, bad flag values).
class ValidationError : public Error {
public:
	using Error::Error;
};

void require_file( const std::string& path, const std::string& what )
{
	if( path.empty() ) {
		throw ValidationError( what + " path is empty" );
	}
	if( !fs::is_regular_file( path ) ) {
		throw ValidationError( what + " not found: " + path );
	}
}

std::string json_type( const json& v )
{
	if( v.is_boolean() ) return "boolean";
	if( v.is_number() ) return "number";
	if( v.is_string() ) return "string";
	if( v.is_array() ) return "array";
	if( v.is_object() ) return "object";
	return "null";
}

bool compatible( const json& expected, const json& given )
{
	if( expected.is_null() || given.is_null() ) {
		return true;
	}
	if( expected.is_number_integer() ) {
		return given.is_number_integer() && ( expected.is_number_unsigned() ? given.get<std::int64_t>() >= 0 : true );
	}
	if( expected.is_number() ) {
		return given.is_number();
	}
	return json_type( expected ) == json_type( given );
}

// Overlays a user section onto defaults; unknown keys and type mismatches raise with a pointer.
void overlay( json& target, const json& section, const std::string& at )
{
	if( !section.is_object() ) {
		throw ConfigError( "expected an object", at );
	}
	for( const auto& [key, value] : section.items() ) {
		const std::string here = at + "/" + key;
		if( !target.contains( key ) ) {
			throw ConfigError( "unknown key", here );
		}
		json& slot = target[key];
		if( slot.is_object() && !slot.empty() ) {
			overlay( slot, value, here );
			continue;
		}
		if( !compatible( slot, value ) ) {
			throw ConfigError( "expected " + json_type( slot ) + ", got " + json_type( value ), here );
		}
		slot = value;
	}
}

json read_json_file( const std::string& path )
{
	require_file( path, "config file" );
	std::ifstream in( path );
	try {
		return json::parse( in );
	} catch( const json::parse_error& e ) {
		throw ConfigError( "config " + path + " is not valid JSON: " + e.what(), "" );
	}
}

// Returns the named section of a run config, checking the envelope.
json config_section( const std::string& path, const std::string& section )
{
	if( path.empty() ) {
		return json::object();
	}
	const json doc = read_json_file( path );
	if( !doc.is_object() ) {
		throw ConfigError( "run config must be a JSON object", "" );
	}
	for( const auto& [key, value] : doc.items() ) {
		if( key == "schema_version" ) {
			if( !value.is_number_integer() || value.get<int>() != kSchemaVersion ) {
				throw ConfigError( "unsupported schema_version (expected " + std::to_string( kSchemaVersion ) + ")", "/schema_version" );
			}
		} else if( key != section ) {
			throw ConfigError( "unknown key", "/" + key );
		}
	}
	return doc.contains( section ) ? doc.at( section ) : json::object();
}

std::string hash_file( const fs::path& p )
{
	std::ifstream in( p, std::ios::binary );
	std::vector<char> bytes( ( std::istreambuf_iterator<char>( in ) ), std::istreambuf_iterator<char>() );
	return hex64( fnv1a64( bytes.data(), bytes.size() ) );
}

// Output directory bookkeeping shared by all commands.
class RunOutput {
public:
	RunOutput( const std::string& dir, const std::vector<std::string>& inputs ) : dir_( dir )
	{
		if( dir.empty() ) {
			throw ValidationError( "--out is required" );
		}
		fs::create_directories( dir_ );
		const fs::path outCanon = fs::weakly_canonical( dir_ );
		for( const auto& in : inputs ) {
			if( in.empty() ) {
				continue;
			}
			const fs::path inCanon = fs::weakly_canonical( fs::path( in ) );
			const fs::path inDir = fs::is_directory( inCanon ) ? inCanon : inCanon.parent_path();
			if( inDir == outCanon ) {
				throw ValidationError( "output directory must differ from the input location " + inDir.string() );
			}
		}
	}

	const fs::path& dir() const { return dir_; }
	fs::path path( const std::string& rel ) const { return dir_ / rel; }

	void write_json( const std::string& rel, const json& j ) const
	{
		const fs::path p = path( rel );
		fs::create_directories( p.parent_path() );
		std::ofstream out( p );
		if( !out ) {
			throw IoError( "cannot write " + p.string() );
		}
		out << j.dump( 2 ) << '\n';
	}

	// Writes the resolved config and a hash manifest of every file under the output directory.
	void finish( const json& resolved ) const
	{
		write_json( kResolvedConfigName, resolved );
		std::vector<std::string> files;
		for( const auto& entry : fs::recursive_directory_iterator( dir_ ) ) {
			if( entry.is_regular_file() ) {
				const std::string rel = fs::relative( entry.path(), dir_ ).generic_string();
				if( rel != kOutputsName ) {
					files.push_back( rel );
				}
			}
		}
		std::sort( files.begin(), files.end() );
		json list = json::array();
		for( const auto& rel : files ) {
			const fs::path p = path( rel );
			list.push_back( { { "path", rel }, { "bytes", fs::file_size( p ) }, { "fnv1a64", hash_file( p ) } } );
		}
		write_json( kOutputsName, { { "schema_version", kSchemaVersion }, { "files", list } } );
	}

private:
	fs::path dir_;
};

std::vector<SequenceTag> case_sequences( const CaseRecord& record )
{
	std::vector<SequenceTag> tags;
	for( const auto& [name, path] : record.sequence_paths ) {
		tags.push_back( parse_sequence( name ) );
	}
	std::sort( tags.begin(), tags.end() );
	return tags;
}

std::string sequence_file_name( const std::string& caseId, SequenceTag tag )
{
	return caseId + "_" + sequence_name( tag ) + ".nii.gz";
}

CancerDefinition parse_mode( const std::string& mode )
{
	std::string m = mode;
	std::transform( m.begin(), m.end(), m.begin(), [] ( unsigned char c ) { return static_cast<char>( std::tolower( c ) ); } );
	if( m == "cspca" ) {
		return CancerDefinition::CsPCaOnly;
	}
	if( m == "all" || m == "all_cancer" ) {
		return CancerDefinition::AllCancer;
	}
	throw ValidationError( "unknown mode '" + mode + "' (expected csPCa or all)" );
}

std::string mode_name( CancerDefinition mode )
{
	return mode == CancerDefinition::CsPCaOnly ? "csPCa" : "all";
}

json optional_json( const std::optional<double>& v )
{
	return v ? json( *v ) : json( nullptr );
}

json confusion_json( const ConfusionMetrics& m )
{
	return { { "tp", m.tp }, { "fp", m.fp }, { "tn", m.tn }, { "fn", m.fn }, { "sensitivity", optional_json( m.sensitivity ) },
		{ "specificity", optional_json( m.specificity ) }, { "ppv", optional_json( m.ppv ) }, { "npv", optional_json( m.npv ) },
		{ "accuracy", optional_json( m.accuracy ) } };
}

json strata_json( const std::vector<StratumRow>& rows )
{
	json out = json::array();
	for( const auto& r : rows ) {
		out.push_back( { { "label", r.label }, { "n", r.n }, { "mean_score", r.mean_score }, { "detection_rate", optional_json( r.detection_rate ) },
			{ "mean_dice", optional_json( r.mean_dice ) } } );
	}
	return out;
}

json spearman_json( const std::optional<SpearmanResult>& s )
{
	if( !s ) {
		return nullptr;
	}
	return { { "rho", s->rho }, { "p_value", s->p_value }, { "n", s->n } };
}

// Selects cases either from a single-case JSON file or from a manifest (optionally one id).
Manifest select_cases( const std::string& manifestPath, const std::string& caseArg )
{
	if( !caseArg.empty() && fs::is_regular_file( caseArg ) ) {
		const json j = read_json_file( caseArg );
		Manifest m;
		m.root = fs::path( caseArg ).parent_path();
		m.cases.push_back( case_from_json( j ) );
		return m;
	}
	if( manifestPath.empty() ) {
		throw ValidationError( caseArg.empty() ? "--manifest or --case is required" : "case file not found: " + caseArg );
	}
	require_file( manifestPath, "manifest" );
	Manifest m = read_manifest( manifestPath );
	if( !caseArg.empty() ) {
		m.cases = { m.find( caseArg ) };
	}
	return m;
}

void check_case_files( const Manifest& m )
{
	for( const auto& c : m.cases ) {
		for( const auto& [name, rel] : c.sequence_paths ) {
			require_file( ( m.root / rel ).string(), "volume" );
		}
		require_file( ( m.root / c.label_path ).string(), "label volume" );
	}
}

std::string zero_pad( std::size_t v, int width )
{
	std::ostringstream s;
	s << std::setw( width ) << std::setfill( '0' ) << v;
	return s.str();
}

struct Common {
	std::string config;
	std::string out;
	std::uint64_t seed = 0;
	bool seed_set = false;
	int threads = 1;
	bool threads_set = false;
};

// ---- phantom ---------------------------------------------------------------

json phantom_defaults()
{
	const CohortProfile p;
	return { { "n", 8 }, { "seed", std::uint64_t( 0 ) },
		{ "profile", { { "cspca_fraction", p.cspca_fraction }, { "indolent_fraction", p.indolent_fraction },
			{ "negative_fraction", p.negative_fraction }, { "contrast_scale", p.contrast_scale }, { "noise_sigma", p.noise_sigma },
			{ "shape", { p.shape.nz, p.shape.ny, p.shape.nx } }, { "spacing", { p.spacing.dz, p.spacing.dy, p.spacing.dx } } } } };
}

CohortProfile profile_from_json( const json& j )
{
	CohortProfile p;
	p.cspca_fraction = j.at( "cspca_fraction" ).get<double>();
	p.indolent_fraction = j.at( "indolent_fraction" ).get<double>();
	p.negative_fraction = j.at( "negative_fraction" ).get<double>();
	p.contrast_scale = j.at( "contrast_scale" ).get<double>();
	p.noise_sigma = j.at( "noise_sigma" ).get<double>();
	const auto& s = j.at( "shape" );
	const auto& sp = j.at( "spacing" );
	if( !s.is_array() || s.size() != 3 ) {
		throw ConfigError( "shape must be [nz, ny, nx]", "/phantom/profile/shape" );
	}
	if( !sp.is_array() || sp.size() != 3 ) {
		throw ConfigError( "spacing must be [z, y, x]", "/phantom/profile/spacing" );
	}
	p.shape = { s[0].get<std::size_t>(), s[1].get<std::size_t>(), s[2].get<std::size_t>() };
	p.spacing = { sp[0].get<double>(), sp[1].get<double>(), sp[2].get<double>() };
	return p;
}

int cmd_phantom( const Common& common, std::optional<int> n, const std::string& profileArg, std::ostream& out )
{
	json cfg = phantom_defaults();
	overlay( cfg, config_section( common.config, "phantom" ), "/phantom" );
	if( !profileArg.empty() && profileArg != "default" ) {
		overlay( cfg["profile"], read_json_file( profileArg ), "/phantom/profile" );
	}
	if( n ) {
		cfg["n"] = *n;
	}
	if( common.seed_set ) {
		cfg["seed"] = common.seed;
	}
	if( cfg["n"].get<int>() < 1 ) {
		throw ConfigError( "n must be positive", "/phantom/n" );
	}
	const CohortProfile profile = profile_from_json( cfg["profile"] );
	RunOutput run( common.out, {} );
	const Cohort cohort = plan_cohort( cfg["n"].get<std::size_t>(), cfg["seed"].get<std::uint64_t>(), profile );
	const Manifest manifest = write_cohort( cohort, run.dir() );
	run.finish( { { "schema_version", kSchemaVersion }, { "command", "phantom" }, { "phantom", cfg } } );
	out << "wrote " << manifest.cases.size() << " phantom cases to " << run.dir().string() << '\n';
	return kOk;
}

// ---- preprocess ------------------------------------------------------------

int cmd_preprocess( const Common& common, const std::string& manifestPath, std::ostream& out )
{
	json cfg = { { "spacing", { kStandardSpacing.dz, kStandardSpacing.dy, kStandardSpacing.dx } }, { "crop", kCropSize } };
	overlay( cfg, config_section( common.config, "preprocess" ), "/preprocess" );
	if( cfg["spacing"].size() != 3 ) {
		throw ConfigError( "spacing must be [z, y, x]", "/preprocess/spacing" );
	}
	const Spacing target{ cfg["spacing"][0].get<double>(), cfg["spacing"][1].get<double>(), cfg["spacing"][2].get<double>() };
	const auto crop = cfg["crop"].get<std::size_t>();
	require_file( manifestPath, "manifest" );
	const Manifest input = read_manifest( manifestPath );
	check_case_files( input );
	RunOutput run( common.out, { manifestPath } );
	Manifest result;
	result.root = run.dir();
	json degenerate = json::object();
	for( const auto& record : input.cases ) {
		const auto tags = case_sequences( record );
		const LoadedCase loaded = load_case( input, record, tags );
		const PreprocessedCase pre = preprocess_case( loaded.sequences, loaded.labels, target, crop );
		CaseRecord outRecord = record;
		outRecord.sequence_paths.clear();
		for( std::size_t i = 0; i < tags.size(); ++i ) {
			const std::string file = sequence_file_name( record.case_id, tags[i] );
			write_nifti( pre.sequences[i], run.path( file ) );
			outRecord.sequence_paths[sequence_name( tags[i] )] = file;
			if( pre.degenerate[i] ) {
				degenerate[record.case_id].push_back( sequence_name( tags[i] ) );
			}
		}
		outRecord.label_path = record.case_id + "_label.nii.gz";
		write_nifti( pre.labels, run.path( outRecord.label_path ) );
		result.cases.push_back( std::move( outRecord ) );
		out << "preprocessed " << record.case_id << '\n';
	}
	write_manifest( result, run.path( "manifest.json" ) );
	if( !degenerate.empty() ) {
		run.write_json( "degenerate_normalization.json", degenerate );
	}
	run.finish( { { "schema_version", kSchemaVersion }, { "command", "preprocess" }, { "manifest", manifestPath }, { "preprocess", cfg } } );
	return kOk;
}

// ---- train / ablation ------------------------------------------------------

TrainConfig resolve_train_config( const Common& common, std::optional<int> maxSteps )
{
	const json section = config_section( common.config, "train" );
	TrainConfig cfg;
	try {
		cfg = train_config_from_json( section );
	} catch( const ConfigError& e ) {
		throw e.under( "train" );
	}
	if( common.seed_set ) {
		cfg.seed = common.seed;
	}
	if( common.threads_set ) {
		cfg.threads = common.threads;
	}
	if( maxSteps ) {
		cfg.max_steps = *maxSteps;
	}
	cfg.output_dir = common.out;
	try {
		cfg.validate();
	} catch( const ConfigError& e ) {
		throw e.under( "train" );
	}
	return cfg;
}

StepCallback progress_printer( std::ostream& out )
{
	return [&out] ( const HistoryRow& r ) {
		if( r.step == 1 || r.step % 10 == 0 ) {
			out << "step " << r.step << " seg " << r.seg_loss << " contrastive " << r.contrastive_loss << " total " << r.total << '\n';
		}
	};
}

int cmd_train( const Common& common, const std::string& manifestPath, std::optional<int> maxSteps, std::ostream& out )
{
	TrainConfig cfg = resolve_train_config( common, maxSteps );
	require_file( manifestPath, "manifest" );
	const Manifest manifest = read_manifest( manifestPath );
	check_case_files( manifest );
	RunOutput run( common.out, { manifestPath } );
	const TrainResult result = train( manifest, cfg, progress_printer( out ) );
	json checkpoints = json::array();
	for( const auto& c : result.checkpoints ) {
		checkpoints.push_back( c.to_json() );
	}
	run.write_json( "train_summary.json",
		{ { "best", result.best_record.to_json() }, { "checkpoints", checkpoints }, { "train_cases", result.train_cases },
			{ "val_cases", result.val_cases }, { "pairs_requested", result.pairs_requested }, { "steps", result.history.size() },
			{ "pretrained", result.pretrained_report ? result.pretrained_report->to_json() : json( nullptr ) },
			{ "warnings", result.warnings } } );
	for( const auto& w : result.warnings ) {
		out << "warning: " << w << '\n';
	}
	run.finish( { { "schema_version", kSchemaVersion }, { "command", "train" }, { "manifest", manifestPath }, { "train", to_json( cfg ) } } );
	out << "best checkpoint " << result.best_record.weights_path << " (" << result.best_record.metric_source << " " << result.best_record.metric
		<< ")\n";
	return kOk;
}

int cmd_ablation( const Common& common, const std::string& manifestPath, std::optional<int> maxSteps, std::ostream& out )
{
	TrainConfig cfg = resolve_train_config( common, maxSteps );
	require_file( manifestPath, "manifest" );
	const Manifest manifest = read_manifest( manifestPath );
	check_case_files( manifest );
	RunOutput run( common.out, { manifestPath } );
	const auto rows = run_ablation_suite( manifest, cfg, progress_printer( out ) );
	write_ablation_csv( rows, run.path( "ablation.csv" ).string() );
	json audit = json::array();
	for( const auto& r : rows ) {
		audit.push_back( { { "name", r.name },
			{ "flags", { { "pretrained", r.flags.pretrained }, { "lora_frozen", r.flags.lora_frozen }, { "axial_embed", r.flags.axial_embed },
				{ "contrastive", r.flags.contrastive } } },
			{ "auroc", r.auroc }, { "sensitivity", optional_json( r.sensitivity ) }, { "specificity", optional_json( r.specificity ) },
			{ "trainable_parameters", r.trainable_parameters }, { "total_parameters", r.total_parameters },
			{ "trainable_backbone", r.trainable_backbone } } );
	}
	run.write_json( "ablation.json", audit );
	run.finish( { { "schema_version", kSchemaVersion }, { "command", "ablation" }, { "manifest", manifestPath }, { "train", to_json( cfg ) } } );
	out << "wrote " << rows.size() << " ablation rows\n";
	return kOk;
}

// ---- predict ---------------------------------------------------------------

constexpr std::array<const char*, 4> kClassNames{ "background", "gland", "indolent", "cspca" };

std::string probability_file( const std::string& caseId, int cls )
{
	return caseId + "/prob_" + kClassNames[static_cast<std::size_t>( cls )] + ".nii.gz";
}

int cmd_predict( const Common& common, const std::string& weightsPath, const std::string& manifestPath, const std::string& caseArg, bool heatmaps,
	std::ostream& out )
{
	json cfg = { { "heatmaps", true }, { "threads", 1 } };
	overlay( cfg, config_section( common.config, "predict" ), "/predict" );
	if( !heatmaps ) {
		cfg["heatmaps"] = false;
	}
	if( common.threads_set ) {
		cfg["threads"] = common.threads;
	}
	if( cfg["threads"].get<int>() < 1 ) {
		throw ConfigError( "threads must be positive", "/predict/threads" );
	}
	require_file( weightsPath, "weights" );
	const Manifest manifest = select_cases( manifestPath, caseArg );
	check_case_files( manifest );
	RunOutput run( common.out, { weightsPath, manifestPath } );
	const WeightBundle bundle = read_bundle( weightsPath );
	Model<float> model = model_from_bundle<float>( bundle );
	model.set_training( false );
	const auto& seqs = model.config().sequences;
	json listing = json::array();
	for( const auto& record : manifest.cases ) {
		Manifest one{ manifest.root, { record } };
		const auto prepared = prepare_cases( one, seqs );
		const PreparedCase& pc = prepared.front();
		const ProbabilityVolumes probs = predict_volume( model, pc.sequences, cfg["threads"].get<int>() );
		const std::array<const Volume*, 4> vols{ &probs.background, &probs.gland, &probs.indolent, &probs.cspca };
		json files = json::object();
		for( int k = 0; k < 4; ++k ) {
			const std::string rel = probability_file( record.case_id, k );
			fs::create_directories( run.path( rel ).parent_path() );
			write_nifti( *vols[static_cast<std::size_t>( k )], run.path( rel ) );
			files[kClassNames[static_cast<std::size_t>( k )]] = rel;
		}
		if( cfg["heatmaps"].get<bool>() ) {
			const Shape3& s = probs.cspca.shape;
			for( std::size_t z = 0; z < s.nz; ++z ) {
				Plane<float> plane( s.ny, s.nx );
				const auto src = probs.cspca.slice( z );
				std::copy( src.begin(), src.end(), plane.data.begin() );
				const std::string rel = record.case_id + "/heatmaps/cspca_slice" + zero_pad( z, 3 ) + ".png";
				fs::create_directories( run.path( rel ).parent_path() );
				write_heatmap_png( run.path( rel ).string(), plane );
			}
		}
		listing.push_back( { { "case_id", record.case_id }, { "files", files } } );
		out << "predicted " << record.case_id << '\n';
	}
	run.write_json( "predictions.json", { { "weights_hash", bundle.hash }, { "cases", listing } } );
	run.finish( { { "schema_version", kSchemaVersion }, { "command", "predict" }, { "weights", weightsPath }, { "manifest", manifestPath },
		{ "case", caseArg }, { "predict", cfg } } );
	return kOk;
}

// ---- evaluate --------------------------------------------------------------

void write_records_csv( const std::vector<LesionRecord>& records, const fs::path& path )
{
	std::ofstream out( path );
	if( !out ) {
		throw IoError( "cannot write " + path.string() );
	}
	out.precision( 10 );
	out << "case_id,region_id,kind,score,volume_ml,gg,psa,cspca\n";
	for( const auto& r : records ) {
		out << r.case_id << ',' << r.region_id << ',' << ( r.kind == RecordKind::Positive ? "positive" : "negative" ) << ',' << r.score << ','
			<< r.volume_ml << ',' << r.gg << ',' << r.psa << ',' << ( r.cspca ? 1 : 0 ) << '\n';
	}
}

int cmd_evaluate( const Common& common, const std::string& predictionsDir, const std::string& manifestPath, const std::string& modeArg,
	const std::string& aggregateArg, std::ostream& out )
{
	json cfg = { { "mode", "csPCa" }, { "seed", std::uint64_t( 0 ) }, { "ai_aggregate", "max" } };
	overlay( cfg, config_section( common.config, "evaluate" ), "/evaluate" );
	if( !modeArg.empty() ) {
		cfg["mode"] = modeArg;
	}
	if( !aggregateArg.empty() ) {
		cfg["ai_aggregate"] = aggregateArg;
	}
	const std::string agg = cfg["ai_aggregate"].get<std::string>();
	if( agg != "max" && agg != "mean" ) {
		throw ConfigError( "ai_aggregate must be max or mean", "/evaluate/ai_aggregate" );
	}
	if( common.seed_set ) {
		cfg["seed"] = common.seed;
	}
	const CancerDefinition mode = parse_mode( cfg["mode"].get<std::string>() );
	cfg["mode"] = mode_name( mode );
	const fs::path listingPath = fs::path( predictionsDir ) / "predictions.json";
	require_file( listingPath.string(), "predictions listing" );
	require_file( manifestPath, "manifest" );
	const Manifest manifest = read_manifest( manifestPath );
	check_case_files( manifest );
	const json listing = read_json_file( listingPath.string() );
	std::map<std::string, json> predicted;
	for( const auto& c : listing.at( "cases" ) ) {
		predicted[c.at( "case_id" ).get<std::string>()] = c.at( "files" );
	}
	RunOutput run( common.out, { manifestPath, predictionsDir } );

	std::vector<LesionRecord> records;
	std::vector<StratifiedItem> items;
	json perCase = json::array();
	double diceSum = 0;
	std::size_t diceN = 0;
	std::vector<std::string> skipped;
	std::vector<CaseRecord> evaluated;
	for( const auto& record : manifest.cases ) {
		const auto it = predicted.find( record.case_id );
		if( it == predicted.end() ) {
			skipped.push_back( record.case_id );
			continue;
		}
		evaluated.push_back( record );
		const Manifest one{ manifest.root, { record } };
		const LabelVolume labels = prepare_cases( one, case_sequences( record ) ).front().labels;
		ProbabilityVolumes probs;
		std::array<Volume*, 4> vols{ &probs.background, &probs.gland, &probs.indolent, &probs.cspca };
		for( std::size_t k = 0; k < 4; ++k ) {
			const fs::path p = fs::path( predictionsDir ) / it->second.at( kClassNames[k] ).get<std::string>();
			require_file( p.string(), "probability volume" );
			*vols[k] = read_volume( p );
			if( vols[k]->shape != labels.shape ) {
				throw ValidationError( "prediction " + p.string() + " does not match the preprocessed label geometry" );
			}
		}
		const CaseEvaluation ev = evaluate_case( labels, probs, mode, record );
		records.insert( records.end(), ev.records.begin(), ev.records.end() );
		json d = ev.has_cancer ? json( ev.dice.value ) : json( nullptr );
		if( ev.has_cancer ) {
			diceSum += ev.dice.value;
			++diceN;
		}
		for( const auto& r : ev.records ) {
			if( r.kind == RecordKind::Positive ) {
				items.push_back( { r.volume_ml, r.gg, r.psa, r.score, ev.has_cancer ? std::optional<double>( ev.dice.value ) : std::nullopt } );
			}
		}
		perCase.push_back( { { "case_id", record.case_id }, { "dice", d }, { "has_cancer", ev.has_cancer }, { "records", ev.records.size() } } );
	}

	if( evaluated.empty() ) {
		throw ValidationError( "no manifest case has predictions in " + listingPath.string() );
	}
	std::vector<double> scores;
	std::vector<std::uint8_t> labelsVec;
	for( const auto& r : records ) {
		scores.push_back( r.score );
		labelsVec.push_back( r.kind == RecordKind::Positive ? 1 : 0 );
	}
	json metrics = { { "mode", mode_name( mode ) }, { "cases", perCase }, { "records", records.size() },
		{ "mean_dice", diceN ? json( diceSum / static_cast<double>( diceN ) ) : json( nullptr ) } };
	const auto positives = static_cast<std::size_t>( std::count( labelsVec.begin(), labelsVec.end(), 1 ) );
	metrics["positives"] = positives;
	metrics["unpredicted_cases"] = skipped;
	metrics["negatives"] = records.size() - positives;
	if( positives > 0 && positives < records.size() ) {
		const double threshold = select_threshold( records );
		const MetricsReport rep = patient_level_metrics( records, threshold );
		metrics["patient_auroc"] = rep.patient_auroc;
		metrics["eligible_patients"] = rep.eligible_patients;
		metrics["pooled_auroc"] = rep.pooled.auroc;
		metrics["pooled_variance"] = rep.pooled.variance;
		metrics["pooled_ci"] = { rep.pooled.ci_low, rep.pooled.ci_high };
		metrics["auprc"] = optional_json( rep.auprc );
		metrics["threshold"] = threshold;
		metrics["confusion"] = confusion_json( rep.confusion );
		if( !items.empty() ) {
			try {
				const auto strat = stratify_and_correlate( items, threshold, cfg["seed"].get<std::uint64_t>() );
				run.write_json( "stratification.json",
					{ { "volume_quartiles", strata_json( strat.volume_quartiles ) }, { "gg_groups", strata_json( strat.gg_groups ) },
						{ "psa_quartiles", strata_json( strat.psa_quartiles ) }, { "volume_vs_score", spearman_json( strat.volume_vs_score ) },
						{ "volume_vs_dice", spearman_json( strat.volume_vs_dice ) }, { "psa_vs_score", spearman_json( strat.psa_vs_score ) } } );
			} catch( const Error& e ) {
				metrics["stratification_error"] = e.what();
			}
		}
	} else {
		metrics["patient_auroc"] = nullptr;
		metrics["warning"] = "AUROC undefined: records contain a single class";
	}
	run.write_json( "metrics.json", metrics );
	write_records_csv( records, run.path( "lesion_records.csv" ) );
	write_screening_csv( screening_records( records, evaluated, agg == "max" ? AiAggregate::Max : AiAggregate::Mean ), run.path( "screening_records.csv" ).string() );
	run.finish( { { "schema_version", kSchemaVersion }, { "command", "evaluate" }, { "predictions", predictionsDir }, { "manifest", manifestPath },
		{ "evaluate", cfg } } );
	if( !skipped.empty() ) {
		out << "warning: " << skipped.size() << " manifest cases have no predictions and were skipped\n";
	}
	out << "patient AUROC " << metrics["patient_auroc"].dump() << ", mean DSC " << metrics["mean_dice"].dump() << '\n';
	return kOk;
}

// ---- screen ----------------------------------------------------------------

json screen_block( const std::vector<ScreeningRecord>& calibration, const std::vector<ScreeningRecord>& evaluation, std::vector<std::string>& notes )
{
	StackingModel model = calibrate_threshold( fit_logistic( calibration ), calibration );
	const ScreeningReport report = screen_report( model, evaluation );
	notes.insert( notes.end(), model.warnings.begin(), model.warnings.end() );
	json j = to_json( report );
	j["calibration_records"] = calibration.size();
	return j;
}

int cmd_screen( const Common& common, const std::string& recordsPath, std::optional<std::size_t> synthetic, std::optional<double> split,
	bool perCohort, std::ostream& out )
{
	json cfg = { { "calibration_split", 0.0 }, { "per_cohort", false }, { "seed", std::uint64_t( 0 ) }, { "synthetic_n", nullptr },
		{ "prevalence", 0.35 } };
	overlay( cfg, config_section( common.config, "screen" ), "/screen" );
	if( split ) {
		cfg["calibration_split"] = *split;
	}
	if( perCohort ) {
		cfg["per_cohort"] = true;
	}
	if( synthetic ) {
		cfg["synthetic_n"] = *synthetic;
	}
	if( common.seed_set ) {
		cfg["seed"] = common.seed;
	}
	const double frac = cfg["calibration_split"].get<double>();
	if( !( frac >= 0 && frac < 1 ) ) {
		throw ConfigError( "calibration_split must lie in [0, 1)", "/screen/calibration_split" );
	}
	std::vector<ScreeningRecord> records;
	if( !cfg["synthetic_n"].is_null() ) {
		if( !recordsPath.empty() ) {
			throw ValidationError( "--records and --synthetic are mutually exclusive" );
		}
		records = synthetic_screening_cohort( cfg["synthetic_n"].get<std::size_t>(), cfg["seed"].get<std::uint64_t>(), cfg["prevalence"].get<double>() );
	} else {
		require_file( recordsPath, "records CSV" );
		records = read_screening_csv( recordsPath );
	}
	if( records.empty() ) {
		throw ValidationError( "no screening records" );
	}
	RunOutput run( common.out, { recordsPath } );
	if( !cfg["synthetic_n"].is_null() ) {
		write_screening_csv( records, run.path( "synthetic_records.csv" ).string() );
	}

	std::vector<ScreeningRecord> calibration = records, evaluation = records;
	if( frac > 0 ) {
		std::vector<std::size_t> order( records.size() );
		for( std::size_t i = 0; i < order.size(); ++i ) {
			order[i] = i;
		}
		std::mt19937_64 rng( derive_seed( cfg["seed"].get<std::uint64_t>(), 0x63616c6962 ) );
		std::shuffle( order.begin(), order.end(), rng );
		const auto nCal = static_cast<std::size_t>( std::llround( frac * static_cast<double>( records.size() ) ) );
		if( nCal == 0 || nCal == records.size() ) {
			throw ValidationError( "calibration split leaves an empty partition" );
		}
		calibration.clear();
		evaluation.clear();
		for( std::size_t i = 0; i < order.size(); ++i ) {
			( i < nCal ? calibration : evaluation ).push_back( records[order[i]] );
		}
	}

	std::vector<std::string> notes;
	StackingModel model = calibrate_threshold( fit_logistic( calibration ), calibration );
	const ScreeningReport report = screen_report( model, evaluation );
	run.write_json( "model.json", to_json( model ) );
	json reportJson = to_json( report );
	reportJson["calibration_records"] = calibration.size();
	reportJson["evaluation_records"] = evaluation.size();
	if( cfg["per_cohort"].get<bool>() ) {
		std::map<std::string, std::vector<ScreeningRecord>> groups;
		for( const auto& r : records ) {
			groups[r.cohort].push_back( r );
		}
		json cohorts = json::object();
		for( const auto& [name, group] : groups ) {
			try {
				cohorts[name.empty() ? "unlabeled" : name] = screen_block( group, group, notes );
			} catch( const Error& e ) {
				cohorts[name.empty() ? "unlabeled" : name] = { { "error", e.what() } };
			}
		}
		reportJson["per_cohort"] = cohorts;
	}
	notes.insert( notes.end(), model.warnings.begin(), model.warnings.end() );
	reportJson["warnings"] = notes;
	run.write_json( "report.json", reportJson );
	write_comparison_csv( report, run.path( "comparison.csv" ).string() );
	run.finish( { { "schema_version", kSchemaVersion }, { "command", "screen" }, { "records", recordsPath }, { "screen", cfg } } );
	auto fmt = [] ( const std::optional<double>& v ) { return v ? std::to_string( *v ) : std::string( "undefined" ); };
	out << "PSA rule sensitivity " << fmt( report.psa_rule.sensitivity ) << " specificity " << fmt( report.psa_rule.specificity ) << '\n';
	out << "stacked sensitivity " << fmt( report.stacked.sensitivity ) << " specificity " << fmt( report.stacked.specificity ) << '\n';
	for( const auto& w : notes ) {
		out << "warning: " << w << '\n';
	}
	return kOk;
}

// ---- features --------------------------------------------------------------

int cmd_features( const Common& common, const std::string& weightsPath, const std::string& manifestPath, const std::string& caseArg,
	std::ostream& out )
{
	json cfg = { { "slices", json::array() } };
	overlay( cfg, config_section( common.config, "features" ), "/features" );
	std::vector<std::size_t> slices;
	for( std::size_t i = 0; i < cfg["slices"].size(); ++i ) {
		if( !cfg["slices"][i].is_number_unsigned() ) {
			throw ConfigError( "slice indices must be non-negative integers", "/features/slices/" + std::to_string( i ) );
		}
		slices.push_back( cfg["slices"][i].get<std::size_t>() );
	}
	if( caseArg.empty() ) {
		throw ValidationError( "--case is required" );
	}
	require_file( weightsPath, "weights" );
	const Manifest manifest = select_cases( manifestPath, caseArg );
	check_case_files( manifest );
	RunOutput run( common.out, { weightsPath, manifestPath } );
	Model<float> model = model_from_bundle<float>( read_bundle( weightsPath ) );
	model.set_training( false );
	const auto prepared = prepare_cases( manifest, model.config().sequences );
	const PreparedCase& pc = prepared.front();
	const FeatureExport fx = feature_pca_maps( model, pc.sequences, pc.labels, slices );
	write_feature_csv( fx, pc.record.case_id, run.path( "features.csv" ).string() );

	// One intensity window per (sequence, component) so slices share a scale.
	json pcaJson = json::array();
	for( std::size_t s = 0; s < fx.sequences.size(); ++s ) {
		const PcaResult& pca = fx.pca[s];
		const double total = pca.eigenvalues.sum();
		std::vector<double> ratio;
		for( Eigen::Index k = 0; k < pca.eigenvalues.size() && k < 3; ++k ) {
			ratio.push_back( total > 0 ? pca.eigenvalues( k ) / total : 0.0 );
		}
		pcaJson.push_back( { { "sequence", sequence_name( fx.sequences[s] ) }, { "explained_variance_ratio", ratio },
			{ "eigenvalues", std::vector<double>( pca.eigenvalues.data(), pca.eigenvalues.data() + std::min<Eigen::Index>( pca.eigenvalues.size(), 3 ) ) } } );
		for( int c = 0; c < 3; ++c ) {
			double lo = 0, hi = 0;
			bool first = true;
			for( const auto& m : fx.maps ) {
				if( m.sequence != fx.sequences[s] ) {
					continue;
				}
				for( float v : m.components[static_cast<std::size_t>( c )].data ) {
					lo = first ? v : std::min<double>( lo, v );
					hi = first ? v : std::max<double>( hi, v );
					first = false;
				}
			}
			if( !( hi > lo ) ) {
				hi = lo + 1.0;
			}
			for( const auto& m : fx.maps ) {
				if( m.sequence != fx.sequences[s] ) {
					continue;
				}
				const std::string rel = std::string( "pca/" ) + sequence_name( m.sequence ) + "_slice" + zero_pad( m.slice, 3 ) + "_pc" +
					std::to_string( c + 1 ) + ".png";
				fs::create_directories( run.path( rel ).parent_path() );
				write_heatmap_png( run.path( rel ).string(), m.components[static_cast<std::size_t>( c )], lo, hi );
			}
		}
	}
	run.write_json( "pca.json", { { "case_id", pc.record.case_id }, { "patches", fx.patches.size() }, { "sequences", pcaJson } } );
	run.finish( { { "schema_version", kSchemaVersion }, { "command", "features" }, { "weights", weightsPath }, { "manifest", manifestPath },
		{ "case", caseArg }, { "features", cfg } } );
	out << "exported " << fx.patches.size() << " gland patches for " << pc.record.case_id << '\n';
	return kOk;
}

void add_common( CLI::App* app, Common& c, bool withConfig = true )
{
	if( withConfig ) {
		app->add_option( "--config", c.config, "Run config JSON (flags override file values)" );
	}
	app->add_option( "--out", c.out, "Output directory" )->required();
	app->add_option_function<std::uint64_t>( "--seed", [&c] ( std::uint64_t s ) { c.seed = s; c.seed_set = true; }, "Master seed" );
	app->add_option_function<int>( "--threads", [&c] ( int t ) { c.threads = t; c.threads_set = true; }, "Worker cap" )
		->check( CLI::PositiveNumber );
}

} // namespace

int run( const std::vector<std::string>& args, std::ostream& out, std::ostream& err )
{
	CLI::App app{ "provit: prostate mpMRI vision-transformer toolkit" };
	app.require_subcommand( 1 );
	Common common;
	std::string manifest, caseArg, weights, predictions, mode, records, profile, aggregate;
	std::optional<int> n, maxSteps;
	std::optional<std::size_t> synthetic;
	std::optional<double> split;
	bool noHeatmaps = false, perCohort = false;

	auto* phantom = app.add_subcommand( "phantom", "Generate a seeded synthetic cohort" );
	add_common( phantom, common );
	phantom->add_option( "--n", n, "Number of cases" );
	phantom->add_option( "--profile", profile, "Cohort profile: 'default' or a JSON file" );

	auto* preprocess = app.add_subcommand( "preprocess", "Resample, crop and normalize a cohort" );
	add_common( preprocess, common );
	preprocess->add_option( "--manifest", manifest, "Input manifest" )->required();

	auto* trainCmd = app.add_subcommand( "train", "Train a model" );
	add_common( trainCmd, common );
	trainCmd->add_option( "--manifest", manifest, "Training manifest" )->required();
	trainCmd->add_option( "--max-steps", maxSteps, "Stop after this many optimizer steps" );

	auto* predict = app.add_subcommand( "predict", "Write probability volumes and heatmaps" );
	add_common( predict, common );
	predict->add_option( "--weights", weights, "Weight bundle" )->required();
	predict->add_option( "--manifest", manifest, "Manifest of cases" );
	predict->add_option( "--case", caseArg, "Case id within the manifest, or a single-case JSON file" );
	predict->add_flag( "--no-heatmaps", noHeatmaps, "Skip PNG heatmaps" );

	auto* evaluate = app.add_subcommand( "evaluate", "Lesion-level metrics from predictions" );
	add_common( evaluate, common );
	evaluate->add_option( "--predictions", predictions, "Directory written by predict" )->required();
	evaluate->add_option( "--manifest", manifest, "Manifest with ground truth" )->required();
	evaluate->add_option( "--mode", mode, "Cancer definition: csPCa or all" );
	evaluate->add_option( "--aggregate", aggregate, "Per-patient AI score in screening_records.csv: max or mean" );

	auto* screen = app.add_subcommand( "screen", "Fit and calibrate the PSA + AI stacking screener" );
	add_common( screen, common );
	screen->add_option( "--records", records, "CSV with case_id,psa,ai_score,label" );
	screen->add_option( "--synthetic", synthetic, "Use a seeded synthetic cohort of this size" );
	screen->add_option( "--calibration-split", split, "Fraction of records used for fitting and calibration" );
	screen->add_flag( "--per-cohort", perCohort, "Also calibrate each cohort separately" );

	auto* features = app.add_subcommand( "features", "Export encoder features and PCA maps" );
	add_common( features, common );
	features->add_option( "--weights", weights, "Weight bundle" )->required();
	features->add_option( "--manifest", manifest, "Manifest holding the case" );
	features->add_option( "--case", caseArg, "Case id or single-case JSON file" );

	auto* ablation = app.add_subcommand( "ablation", "Run the five-row ablation matrix" );
	add_common( ablation, common );
	ablation->add_option( "--manifest", manifest, "Training manifest" )->required();
	ablation->add_option( "--max-steps", maxSteps, "Optimizer steps per row" );

	std::vector<std::string> reversed( args.rbegin(), args.rend() );
	try {
		app.parse( reversed );
	} catch( const CLI::CallForHelp& e ) {
		out << app.help();
		return kOk;
	} catch( const CLI::CallForAllHelp& e ) {
		out << app.help( "", CLI::AppFormatMode::All );
		return kOk;
	} catch( const CLI::ParseError& e ) {
		err << "error: " << e.what() << '\n';
		return kValidationError;
	}

	try {
		if( phantom->parsed() ) return cmd_phantom( common, n, profile, out );
		if( preprocess->parsed() ) return cmd_preprocess( common, manifest, out );
		if( trainCmd->parsed() ) return cmd_train( common, manifest, maxSteps, out );
		if( predict->parsed() ) return cmd_predict( common, weights, manifest, caseArg, !noHeatmaps, out );
		if( evaluate->parsed() ) return cmd_evaluate( common, predictions, manifest, mode, aggregate, out );
		if( screen->parsed() ) return cmd_screen( common, records, synthetic, split, perCohort, out );
		if( features->parsed() ) return cmd_features( common, weights, manifest, caseArg, out );
		if( ablation->parsed() ) return cmd_ablation( common, manifest, maxSteps, out );
	} catch( const ConfigError& e ) {
		err << "config error at " << ( e.pointer().empty() ? std::string( "/" ) : e.pointer() ) << ": " << e.message() << '\n';
		return kValidationError;
	} catch( const ValidationError& e ) {
		err << "error: " << e.what() << '\n';
		return kValidationError;
	} catch( const FormatError& e ) {
		err << "format error: " << e.what() << '\n';
		return kValidationError;
	} catch( const UnsupportedError& e ) {
		err << "unsupported input: " << e.what() << '\n';
		return kValidationError;
	} catch( const std::exception& e ) {
		err << "runtime error: " << e.what() << '\n';
		return kRuntimeError;
	}
	err << "error: no command given\n";
	return kValidationError;
}

} // namespace provit::cli
