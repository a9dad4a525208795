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

#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <vector>

namespace provit {

// Millimeters per voxel along the axial (z), row (y) and column (x) axes.
struct Spacing {
	double dz = 1.0;
	double dy = 1.0;
	double dx = 1.0;

	bool valid() const { return dz > 0 && dy > 0 && dx > 0; }
	bool operator==( const Spacing& ) const = default;
};

struct Shape3 {
	std::size_t nz = 0;
	std::size_t ny = 0;
	std::size_t nx = 0;

	std::size_t size() const { return nz * ny * nx; }
	std::size_t plane() const { return ny * nx; }
	bool operator==( const Shape3& ) const = default;
};

enum class SequenceTag { T2, ADC, DWI, TRUS };

const char* sequence_name( SequenceTag tag );
SequenceTag parse_sequence( const std::string& name );

// Dense axial-major grid: index = (z * ny + y) * nx + x.
template<typename T>
struct Grid3 {
	Shape3 shape;
	Spacing spacing;
	std::vector<T> data;

	Grid3() = default;
	Grid3( Shape3 s, Spacing sp, T fill = T{} ) : shape( s ), spacing( sp ), data( s.size(), fill ) {}

	std::size_t index( std::size_t z, std::size_t y, std::size_t x ) const { return ( z * shape.ny + y ) * shape.nx + x; }
	T& at( std::size_t z, std::size_t y, std::size_t x ) { return data[index( z, y, x )]; }
	const T& at( std::size_t z, std::size_t y, std::size_t x ) const { return data[index( z, y, x )]; }

	std::span<T> slice( std::size_t z ) { return { data.data() + z * shape.plane(), shape.plane() }; }
	std::span<const T> slice( std::size_t z ) const { return { data.data() + z * shape.plane(), shape.plane() }; }
};

struct Volume : Grid3<float> {
	SequenceTag sequence = SequenceTag::T2;

	using Grid3<float>::Grid3;
	// Throws ArgumentError when the voxel buffer or spacing is inconsistent or non-finite.
	void validate() const;
};

// Label codes used throughout.
enum Label : std::uint8_t {
	kBackground = 0,
	kGland = 1,
	kIndolent = 2,
	kCsPCa = 3,
};

struct LabelVolume : Grid3<std::uint8_t> {
	using Grid3<std::uint8_t>::Grid3;
	void validate() const;
};

inline bool is_gland( std::uint8_t label ) { return label >= kGland; }

// One 2D plane with its own shape; used by crop and patch statistics.
template<typename T>
struct Plane {
	std::size_t height = 0;
	std::size_t width = 0;
	std::vector<T> data;

	Plane() = default;
	Plane( std::size_t h, std::size_t w, T fill = T{} ) : height( h ), width( w ), data( h * w, fill ) {}
	T& at( std::size_t y, std::size_t x ) { return data[y * width + x]; }
	const T& at( std::size_t y, std::size_t x ) const { return data[y * width + x]; }
};

// Three consecutive axial planes centered on center_index.
struct SliceStack {
	std::size_t center_index = 0;
	std::array<std::size_t, 3> source_indices{};
	std::array<Plane<float>, 3> slices;
};

struct CaseRecord {
	std::string case_id;
	std::map<std::string, std::string> sequence_paths;
	std::string label_path;
	double psa = 0.0;
	int max_gg = 0;

	void validate() const;
};

} // namespace provit
