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

#include <map>
#include <random>
#include <string>
#include <vector>

#include "provit/autograd.hpp"

namespace provit {

// Learning-rate group of a parameter. Backbone parameters train at a reduced rate.
enum class ParamGroup { Backbone, Head };

template<typename T>
struct Parameter {
	std::string name;
	ag::Var<T> var;
	ParamGroup group = ParamGroup::Head;
};

// Owns every named parameter of a model in registration order.
template<typename T>
class ParameterStore {
public:
	ag::Var<T> add( const std::string& name, ag::Matrix<T> init, ParamGroup group );
	const ag::Var<T>& get( const std::string& name ) const;
	bool contains( const std::string& name ) const { return index_.count( name ) != 0; }

	std::vector<Parameter<T>>& all() { return params_; }
	const std::vector<Parameter<T>>& all() const { return params_; }

	void set_trainable( const std::string& name, bool trainable );
	std::size_t parameter_count( bool trainableOnly ) const;
	void zero_grad();

private:
	std::vector<Parameter<T>> params_;
	std::map<std::string, std::size_t> index_;
};

// Initializers drawing from a caller-owned engine so construction order fixes the values.
template<typename T>
ag::Matrix<T> trunc_normal( std::mt19937_64& rng, Eigen::Index rows, Eigen::Index cols, double stddev );
template<typename T>
ag::Matrix<T> uniform_fan_in( std::mt19937_64& rng, Eigen::Index rows, Eigen::Index cols, Eigen::Index fanIn );

} // namespace provit
