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

#include "provit/manifest.hpp"

#include <algorithm>
#include <fstream>

#include "provit/error.hpp"
#include "provit/nifti.hpp"

namespace provit {

const CaseRecord& Manifest::find( const std::string& caseId ) const
{
	for( const CaseRecord& c : cases ) {
		if( c.case_id == caseId ) {
			return c;
		}
	}
	throw ArgumentError( "case '" + caseId + "' not in manifest" );
}

nlohmann::json to_json( const CaseRecord& record )
{
	nlohmann::json sequences = nlohmann::json::object();
	for( const auto& [tag, path] : record.sequence_paths ) {
		sequences[tag] = path;
	}
	return { { "case_id", record.case_id }, { "sequences", sequences }, { "label", record.label_path }, { "psa", record.psa },
		{ "max_gg", record.max_gg } };
}

CaseRecord case_from_json( const nlohmann::json& j )
{
	if( !j.is_object() ) {
		throw ConfigError( "manifest entry is not an object" );
	}
	static const std::vector<std::string> known = { "case_id", "sequences", "label", "psa", "max_gg" };
	for( const auto& item : j.items() ) {
		if( std::find( known.begin(), known.end(), item.key() ) == known.end() ) {
			throw ConfigError( "manifest entry has unknown key '" + item.key() + "'" );
		}
	}
	CaseRecord r;
	try {
		r.case_id = j.at( "case_id" ).get<std::string>();
		for( const auto& item : j.at( "sequences" ).items() ) {
			parse_sequence( item.key() );
			r.sequence_paths[item.key()] = item.value().get<std::string>();
		}
		r.label_path = j.value( "label", std::string() );
		r.psa = j.value( "psa", 0.0 );
		r.max_gg = j.value( "max_gg", 0 );
	} catch( const nlohmann::json::exception& e ) {
		throw ConfigError( std::string( "malformed manifest entry: " ) + e.what() );
	} catch( const ArgumentError& e ) {
		throw ConfigError( e.what() );
	}
	r.validate();
	return r;
}

Manifest read_manifest( const std::filesystem::path& path )
{
	std::ifstream in( path );
	if( !in ) {
		throw IoError( "cannot open manifest " + path.string() );
	}
	nlohmann::json j;
	try {
		in >> j;
	} catch( const nlohmann::json::exception& e ) {
		throw ConfigError( "manifest " + path.string() + " is not valid JSON: " + e.what() );
	}
	if( !j.is_array() ) {
		throw ConfigError( "manifest " + path.string() + " must be a JSON array" );
	}
	Manifest m;
	m.root = path.parent_path();
	for( const auto& entry : j ) {
		m.cases.push_back( case_from_json( entry ) );
	}
	return m;
}

void write_manifest( const Manifest& manifest, const std::filesystem::path& path )
{
	nlohmann::json j = nlohmann::json::array();
	for( const CaseRecord& c : manifest.cases ) {
		j.push_back( to_json( c ) );
	}
	std::ofstream out( path );
	if( !out ) {
		throw IoError( "cannot write manifest " + path.string() );
	}
	out << j.dump( 2 ) << '\n';
}

void check_grade_consistency( const CaseRecord& record, const LabelVolume& labels )
{
	const bool hasCsPCa = std::any_of( labels.data.begin(), labels.data.end(), []( std::uint8_t l ) { return l == kCsPCa; } );
	if( hasCsPCa != ( record.max_gg >= 2 ) ) {
		throw ArgumentError( "case " + record.case_id + ": max_gg " + std::to_string( record.max_gg ) +
			( hasCsPCa ? " but label volume contains csPCa" : " but label volume has no csPCa voxels" ) );
	}
}

LoadedCase load_case( const Manifest& manifest, const CaseRecord& record, const std::vector<SequenceTag>& sequences )
{
	LoadedCase loaded;
	for( SequenceTag tag : sequences ) {
		auto it = record.sequence_paths.find( sequence_name( tag ) );
		if( it == record.sequence_paths.end() ) {
			throw ArgumentError( "case " + record.case_id + " has no " + sequence_name( tag ) + " sequence" );
		}
		Volume v = read_volume( manifest.root / it->second );
		v.sequence = tag;
		loaded.sequences.push_back( std::move( v ) );
	}
	if( record.label_path.empty() ) {
		throw ArgumentError( "case " + record.case_id + " has no label volume" );
	}
	loaded.labels = read_labels( manifest.root / record.label_path );
	loaded.labels.validate();
	check_grade_consistency( record, loaded.labels );
	return loaded;
}

} // namespace provit
