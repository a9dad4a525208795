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

#include "provit/volume.hpp"

#include <cmath>

#include "provit/error.hpp"

namespace provit {

const char* sequence_name( SequenceTag tag )
{
	switch( tag ) {
		case SequenceTag::T2:
			return "T2";
		case SequenceTag::ADC:
			return "ADC";
		case SequenceTag::DWI:
			return "DWI";
		case SequenceTag::TRUS:
			return "TRUS";
	}
	return "?";
}

SequenceTag parse_sequence( const std::string& name )
{
	if( name == "T2" ) {
		return SequenceTag::T2;
	}
	if( name == "ADC" ) {
		return SequenceTag::ADC;
	}
	if( name == "DWI" ) {
		return SequenceTag::DWI;
	}
	if( name == "TRUS" ) {
		return SequenceTag::TRUS;
	}
	throw ArgumentError( "unknown sequence tag '" + name + "'" );
}

void Volume::validate() const
{
	if( !spacing.valid() ) {
		throw ArgumentError( "volume spacing must be positive" );
	}
	if( data.size() != shape.size() ) {
		throw ArgumentError( "volume data length does not match its shape" );
	}
	for( float v : data ) {
		if( !std::isfinite( v ) ) {
			throw ArgumentError( "volume contains non-finite voxels" );
		}
	}
}

void LabelVolume::validate() const
{
	if( !spacing.valid() ) {
		throw ArgumentError( "label spacing must be positive" );
	}
	if( data.size() != shape.size() ) {
		throw ArgumentError( "label data length does not match its shape" );
	}
	for( std::uint8_t v : data ) {
		if( v > kCsPCa ) {
			throw ArgumentError( "label value " + std::to_string( v ) + " outside {0,1,2,3}" );
		}
	}
}

void CaseRecord::validate() const
{
	if( case_id.empty() ) {
		throw ArgumentError( "case record without case_id" );
	}
	if( !( psa >= 0 ) ) {
		throw ArgumentError( "case " + case_id + ": psa must be >= 0" );
	}
	if( max_gg < 0 || max_gg > 5 ) {
		throw ArgumentError( "case " + case_id + ": max_gg must be in 0..5" );
	}
}

} // namespace provit
