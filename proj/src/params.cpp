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

#include "provit/params.hpp"

#include <cmath>

#include "provit/error.hpp"

namespace provit {

template<typename T>
ag::Var<T> ParameterStore<T>::add( const std::string& name, ag::Matrix<T> init, ParamGroup group )
{
	if( contains( name ) ) {
		throw ArgumentError( "duplicate parameter '" + name + "'" );
	}
	index_[name] = params_.size();
	params_.push_back( { name, ag::leaf<T>( std::move( init ), true ), group } );
	return params_.back().var;
}

template<typename T>
const ag::Var<T>& ParameterStore<T>::get( const std::string& name ) const
{
	auto it = index_.find( name );
	if( it == index_.end() ) {
		throw ArgumentError( "unknown parameter '" + name + "'" );
	}
	return params_[it->second].var;
}

template<typename T>
void ParameterStore<T>::set_trainable( const std::string& name, bool trainable )
{
	get( name ).node()->requires_grad = trainable;
}

template<typename T>
std::size_t ParameterStore<T>::parameter_count( bool trainableOnly ) const
{
	std::size_t n = 0;
	for( const auto& p : params_ ) {
		if( !trainableOnly || p.var.requires_grad() ) {
			n += static_cast<std::size_t>( p.var.value().size() );
		}
	}
	return n;
}

template<typename T>
void ParameterStore<T>::zero_grad()
{
	for( auto& p : params_ ) {
		p.var.node()->zero_grad();
	}
}

template<typename T>
ag::Matrix<T> trunc_normal( std::mt19937_64& rng, Eigen::Index rows, Eigen::Index cols, double stddev )
{
	std::normal_distribution<double> normal( 0.0, 1.0 );
	ag::Matrix<T> m( rows, cols );
	for( Eigen::Index i = 0; i < m.size(); ++i ) {
		double v = normal( rng );
		while( std::fabs( v ) > 2.0 ) {
			v = normal( rng );
		}
		m.data()[i] = static_cast<T>( v * stddev );
	}
	return m;
}

template<typename T>
ag::Matrix<T> uniform_fan_in( std::mt19937_64& rng, Eigen::Index rows, Eigen::Index cols, Eigen::Index fanIn )
{
	const double bound = 1.0 / std::sqrt( static_cast<double>( fanIn ) );
	std::uniform_real_distribution<double> u( -bound, bound );
	ag::Matrix<T> m( rows, cols );
	for( Eigen::Index i = 0; i < m.size(); ++i ) {
		m.data()[i] = static_cast<T>( u( rng ) );
	}
	return m;
}

template class ParameterStore<float>;
template class ParameterStore<double>;
template ag::Matrix<float> trunc_normal<float>( std::mt19937_64&, Eigen::Index, Eigen::Index, double );
template ag::Matrix<double> trunc_normal<double>( std::mt19937_64&, Eigen::Index, Eigen::Index, double );
template ag::Matrix<float> uniform_fan_in<float>( std::mt19937_64&, Eigen::Index, Eigen::Index, Eigen::Index );
template ag::Matrix<double> uniform_fan_in<double>( std::mt19937_64&, Eigen::Index, Eigen::Index, Eigen::Index );

} // namespace provit
