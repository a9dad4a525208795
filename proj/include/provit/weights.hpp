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

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "provit/model.hpp"

namespace provit {

// Weight bundle layout, all integers little-endian:
//   "PVTWB\0\0\1"                 8-byte magic
//   u32 version                   currently 1
//   u64 n, n bytes                config JSON
//   u32 count                     number of arrays
//   per array: u16 name length, name bytes, u8 dtype (1 float32, 2 float64),
//              u8 rank, u64 dims[rank], row-major element bytes
//   u64 FNV-1a 64 hash of every preceding byte
enum class DType : std::uint8_t { Float32 = 1, Float64 = 2 };

struct NamedArray {
	std::string name;
	DType dtype = DType::Float32;
	std::vector<std::uint64_t> shape;
	std::vector<double> values;

	std::uint64_t element_count() const;
};

struct WeightBundle {
	nlohmann::json config;
	std::vector<NamedArray> arrays;
	// Hex content hash; filled by serialization and checked on parse.
	std::string hash;

	const NamedArray* find( const std::string& name ) const;
};

std::uint64_t fnv1a64( const void* data, std::size_t size, std::uint64_t seed = 14695981039346656037ULL );
std::string hex64( std::uint64_t v );

std::vector<std::uint8_t> serialize_bundle( WeightBundle& bundle );
WeightBundle parse_bundle( const std::vector<std::uint8_t>& bytes );
void write_bundle( WeightBundle& bundle, const std::string& path );
WeightBundle read_bundle( const std::string& path );

template<typename T>
WeightBundle bundle_from_model( Model<T>& model );
// Copies every array into an existing model; names and shapes must match exactly.
template<typename T>
void load_into_model( Model<T>& model, const WeightBundle& bundle );
template<typename T>
Model<T> model_from_bundle( const WeightBundle& bundle );

struct LoadReport {
	std::vector<std::string> loaded;
	std::vector<std::string> adapted;
	// Model tensors absent from the bundle, left at their seeded initialization.
	std::vector<std::string> initialized;
	// Bundle tensors the model has no use for.
	std::vector<std::string> unexpected;
	std::string source_hash;

	nlohmann::json to_json() const;
};

// Loads matching tensors from a bundle into a freshly initialized model. The
// planar position table is resized bicubically when the grid differs and a
// three-channel patch embedding is summed down to one channel.
template<typename T>
std::pair<Model<T>, LoadReport> load_pretrained( const std::string& source, const ViTConfig& cfg );
template<typename T>
LoadReport load_pretrained_into( Model<T>& model, const WeightBundle& bundle );

// Bicubic (a = -0.75, half-pixel centers, clamped borders) resize of a
// (gIn * gIn) x d position table to (gOut * gOut) x d.
ag::Matrix<double> resize_positions( const ag::Matrix<double>& table, int gIn, int gOut );

} // namespace provit
