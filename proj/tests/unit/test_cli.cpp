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


#include <filesystem>
#include <fstream>
#include <iterator>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include <gtest/gtest.h>
#include <nlohmann/json.hpp>

#include "cli.hpp"
#include "gradcheck.hpp"
#include "provit/manifest.hpp"
#include "provit/nifti.hpp"
#include "provit/training.hpp"
#include "provit/weights.hpp"

using namespace provit;
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct Invocation {
	int code = -1;
	std::string out;
	std::string err;
};

Invocation invoke( const std::vector<std::string>& args )
{
	std::ostringstream out, err;
	Invocation r;
	r.code = cli::run( args, out, err );
	r.out = out.str();
	r.err = err.str();
	return r;
}

std::string slurp( const fs::path& p )
{
	std::ifstream in( p, std::ios::binary );
	return { std::istreambuf_iterator<char>( in ), {} };
}

std::map<std::string, std::string> tree( const fs::path& root )
{
	std::map<std::string, std::string> files;
	for( const auto& e : fs::recursive_directory_iterator( root ) ) {
		if( e.is_regular_file() ) {
			files[fs::relative( e.path(), root ).generic_string()] = slurp( e.path() );
		}
	}
	return files;
}

void write_text( const fs::path& p, const std::string& text )
{
	std::ofstream( p ) << text;
}

class Cli : public ::testing::Test {
protected:
	static void SetUpTestSuite()
	{
		root_ = fs::temp_directory_path() / "provit_cli_test";
		fs::remove_all( root_ );
		fs::create_directories( root_ );
		const auto r = invoke( { "phantom", "--n", "3", "--seed", "5", "--out", ( root_ / "cohort" ).string() } );
		ASSERT_EQ( r.code, 0 ) << r.err;
	}
	static void TearDownTestSuite() { fs::remove_all( root_ ); }

	static fs::path cohort() { return root_ / "cohort"; }
	static fs::path manifest() { return root_ / "cohort" / "manifest.json"; }
	static fs::path dir( const std::string& name ) { return root_ / name; }

	static fs::path root_;
};

fs::path Cli::root_;

} // namespace

TEST_F( Cli, PhantomIsByteIdenticalAcrossRuns )
{
	const auto a = invoke( { "phantom", "--n", "2", "--seed", "7", "--out", dir( "pa" ).string() } );
	const auto b = invoke( { "phantom", "--n", "2", "--seed", "7", "--out", dir( "pb" ).string() } );
	ASSERT_EQ( a.code, 0 ) << a.err;
	ASSERT_EQ( b.code, 0 ) << b.err;
	const auto ta = tree( dir( "pa" ) ), tb = tree( dir( "pb" ) );
	EXPECT_EQ( ta, tb );
	EXPECT_TRUE( ta.count( "manifest.json" ) );
	EXPECT_TRUE( ta.count( "resolved_config.json" ) );
	EXPECT_TRUE( ta.count( "outputs.json" ) );

	const auto c = invoke( { "phantom", "--n", "2", "--seed", "8", "--out", dir( "pc" ).string() } );
	ASSERT_EQ( c.code, 0 );
	EXPECT_NE( tree( dir( "pc" ) ), ta );
}

TEST_F( Cli, OutputsManifestHashesEveryFile )
{
	const json outputs = json::parse( slurp( cohort() / "outputs.json" ) );
	std::size_t listed = 0;
	for( const auto& f : outputs.at( "files" ) ) {
		const std::string bytes = slurp( cohort() / f.at( "path" ).get<std::string>() );
		EXPECT_EQ( f.at( "bytes" ).get<std::size_t>(), bytes.size() );
		EXPECT_EQ( f.at( "fnv1a64" ).get<std::string>(), hex64( fnv1a64( bytes.data(), bytes.size() ) ) );
		++listed;
	}
	// Everything but outputs.json itself.
	EXPECT_EQ( listed + 1, tree( cohort() ).size() );
	const json resolved = json::parse( slurp( cohort() / "resolved_config.json" ) );
	EXPECT_EQ( resolved.at( "phantom" ).at( "n" ).get<int>(), 3 );
	EXPECT_EQ( resolved.at( "phantom" ).at( "seed" ).get<int>(), 5 );
}

TEST_F( Cli, SchemaViolationsReportPointers )
{
	write_text( dir( "bad_key.json" ), R"({"schema_version": 1, "phantom": {"nn": 3}})" );
	auto r = invoke( { "phantom", "--config", dir( "bad_key.json" ).string(), "--out", dir( "x1" ).string() } );
	EXPECT_EQ( r.code, 1 );
	EXPECT_NE( r.err.find( "/phantom/nn" ), std::string::npos ) << r.err;

	write_text( dir( "bad_type.json" ), R"({"schema_version": 1, "phantom": {"profile": {"noise_sigma": "loud"}}})" );
	r = invoke( { "phantom", "--config", dir( "bad_type.json" ).string(), "--out", dir( "x2" ).string() } );
	EXPECT_EQ( r.code, 1 );
	EXPECT_NE( r.err.find( "/phantom/profile/noise_sigma" ), std::string::npos ) << r.err;

	write_text( dir( "bad_version.json" ), R"({"schema_version": 9})" );
	r = invoke( { "phantom", "--config", dir( "bad_version.json" ).string(), "--out", dir( "x3" ).string() } );
	EXPECT_EQ( r.code, 1 );
	EXPECT_NE( r.err.find( "/schema_version" ), std::string::npos ) << r.err;

	write_text( dir( "bad_train.json" ), R"({"schema_version": 1, "train": {"batch_size": 0}})" );
	r = invoke( { "train", "--config", dir( "bad_train.json" ).string(), "--manifest", manifest().string(), "--out", dir( "x4" ).string() } );
	EXPECT_EQ( r.code, 1 );
	EXPECT_NE( r.err.find( "/train/batch_size" ), std::string::npos ) << r.err;
}

TEST_F( Cli, MissingFilesAndBadArgumentsExitWithOne )
{
	const std::string ghost = dir( "nowhere.json" ).string();
	auto r = invoke( { "preprocess", "--manifest", ghost, "--out", dir( "y1" ).string() } );
	EXPECT_EQ( r.code, 1 );
	EXPECT_NE( r.err.find( ghost ), std::string::npos ) << r.err;

	r = invoke( { "screen", "--records", ghost, "--out", dir( "y2" ).string() } );
	EXPECT_EQ( r.code, 1 );
	EXPECT_NE( r.err.find( ghost ), std::string::npos ) << r.err;

	EXPECT_EQ( invoke( { "phantom" } ).code, 1 );
	EXPECT_EQ( invoke( { "teleport", "--out", "x" } ).code, 1 );
	EXPECT_EQ( invoke( {} ).code, 1 );
	EXPECT_EQ( invoke( { "phantom", "--out", dir( "y3" ).string(), "--threads", "0" } ).code, 1 );
	EXPECT_EQ( invoke( { "--help" } ).code, 0 );
}

TEST_F( Cli, OutputMayNotOverwriteInputs )
{
	const auto r = invoke( { "preprocess", "--manifest", manifest().string(), "--out", cohort().string() } );
	EXPECT_EQ( r.code, 1 );
	EXPECT_NE( r.err.find( "differ" ), std::string::npos ) << r.err;
}

TEST_F( Cli, EvaluateOneHotPredictionsIsPerfect )
{
	const Manifest m = read_manifest( manifest() );
	const fs::path pred = dir( "onehot" );
	json listing = json::array();
	for( const auto& record : m.cases ) {
		const auto pc = prepare_cases( Manifest{ m.root, { record } }, { SequenceTag::T2 } ).front();
		const char* names[4] = { "background", "gland", "indolent", "cspca" };
		json files;
		for( std::uint8_t k = 0; k < 4; ++k ) {
			Volume v( pc.labels.shape, pc.labels.spacing, 0.0f );
			for( std::size_t i = 0; i < v.data.size(); ++i ) {
				v.data[i] = pc.labels.data[i] == k ? 1.0f : 0.0f;
			}
			const std::string rel = record.case_id + "/prob_" + names[k] + ".nii.gz";
			fs::create_directories( pred / record.case_id );
			write_nifti( v, pred / rel );
			files[names[k]] = rel;
		}
		listing.push_back( { { "case_id", record.case_id }, { "files", files } } );
	}
	write_text( pred / "predictions.json", json{ { "cases", listing } }.dump() );

	const auto r = invoke( { "evaluate", "--predictions", pred.string(), "--manifest", manifest().string(), "--out", dir( "ev" ).string() } );
	ASSERT_EQ( r.code, 0 ) << r.err;
	const json metrics = json::parse( slurp( dir( "ev" ) / "metrics.json" ) );
	ASSERT_FALSE( metrics.at( "patient_auroc" ).is_null() ) << metrics.dump();
	EXPECT_DOUBLE_EQ( metrics.at( "patient_auroc" ).get<double>(), 1.0 );
	EXPECT_DOUBLE_EQ( metrics.at( "pooled_auroc" ).get<double>(), 1.0 );
	EXPECT_DOUBLE_EQ( metrics.at( "mean_dice" ).get<double>(), 1.0 );
	EXPECT_TRUE( fs::exists( dir( "ev" ) / "lesion_records.csv" ) );
	EXPECT_TRUE( fs::exists( dir( "ev" ) / "screening_records.csv" ) );
}

TEST_F( Cli, ScreenSyntheticCohortKeepsSensitivity )
{
	const auto r = invoke( { "screen", "--synthetic", "500", "--out", dir( "screen" ).string() } );
	ASSERT_EQ( r.code, 0 ) << r.err;
	const json report = json::parse( slurp( dir( "screen" ) / "report.json" ) );
	EXPECT_GE( report.at( "stacked" ).at( "sensitivity" ).get<double>(), report.at( "psa_rule" ).at( "sensitivity" ).get<double>() );
	EXPECT_GE( report.at( "stacked" ).at( "specificity" ).get<double>(), report.at( "psa_rule" ).at( "specificity" ).get<double>() );
	EXPECT_TRUE( fs::exists( dir( "screen" ) / "comparison.csv" ) );
	EXPECT_TRUE( fs::exists( dir( "screen" ) / "model.json" ) );

	const auto again = invoke( { "screen", "--synthetic", "500", "--out", dir( "screen2" ).string() } );
	ASSERT_EQ( again.code, 0 );
	EXPECT_EQ( tree( dir( "screen" ) ), tree( dir( "screen2" ) ) );

	// The written records feed straight back in.
	const auto fromCsv = invoke( { "screen", "--records", ( dir( "screen" ) / "synthetic_records.csv" ).string(), "--out", dir( "screen3" ).string() } );
	ASSERT_EQ( fromCsv.code, 0 ) << fromCsv.err;
	EXPECT_EQ( json::parse( slurp( dir( "screen3" ) / "model.json" ) ), json::parse( slurp( dir( "screen" ) / "model.json" ) ) );
}

TEST_F( Cli, TrainPredictEvaluateFeaturesPipeline )
{
	TrainConfig cfg;
	cfg.model = gradcheck::end_to_end_small_config( 3 );
	cfg.model.interior_hw = 252;
	cfg.model.decoder_channels = 4;
	cfg.batch_size = 2;
	cfg.val_fraction = 0.0;
	cfg.validate_every = 0;
	cfg.flags.pretrained = false;
	json train = to_json( cfg );
	train.erase( "output_dir" );
	write_text( dir( "train.json" ), json{ { "schema_version", 1 }, { "train", train } }.dump() );

	auto r = invoke( { "train", "--config", dir( "train.json" ).string(), "--manifest", manifest().string(), "--max-steps", "2", "--seed", "4",
		"--out", dir( "run" ).string() } );
	ASSERT_EQ( r.code, 0 ) << r.err;
	const fs::path weights = dir( "run" ) / "best.pvtw";
	ASSERT_TRUE( fs::exists( weights ) );
	EXPECT_TRUE( fs::exists( dir( "run" ) / "resolved_config.json" ) );

	r = invoke( { "predict", "--weights", weights.string(), "--manifest", manifest().string(), "--case", "case0001", "--out", dir( "pred" ).string() } );
	ASSERT_EQ( r.code, 0 ) << r.err;
	const json listing = json::parse( slurp( dir( "pred" ) / "predictions.json" ) );
	ASSERT_EQ( listing.at( "cases" ).size(), 1u );
	EXPECT_TRUE( fs::exists( dir( "pred" ) / "case0001" / "prob_cspca.nii.gz" ) );
	EXPECT_TRUE( fs::exists( dir( "pred" ) / "case0001" / "heatmaps" / "cspca_slice000.png" ) );

	r = invoke( { "evaluate", "--predictions", dir( "pred" ).string(), "--manifest", manifest().string(), "--out", dir( "pred_ev" ).string() } );
	ASSERT_EQ( r.code, 0 ) << r.err;
	const json metrics = json::parse( slurp( dir( "pred_ev" ) / "metrics.json" ) );
	EXPECT_EQ( metrics.at( "unpredicted_cases" ).size(), 2u );

	r = invoke( { "features", "--weights", weights.string(), "--manifest", manifest().string(), "--case", "case0001", "--out", dir( "feat" ).string() } );
	ASSERT_EQ( r.code, 0 ) << r.err;
	EXPECT_TRUE( fs::exists( dir( "feat" ) / "features.csv" ) );
	EXPECT_TRUE( fs::exists( dir( "feat" ) / "pca.json" ) );
}
