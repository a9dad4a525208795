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

#include "provit/contrastive.hpp"

#include <algorithm>
#include <cmath>
#include <random>

#include "provit/error.hpp"

namespace provit {

namespace {

constexpr double kEps = 1e-12;
// Tolerance for the inclusive fraction threshold.
constexpr double kThresholdSlack = 1e-12;

// Samples k distinct elements (order-preserving by draw) from `pool`.
std::vector<PatchPair> undersample( std::vector<PatchPair> pool, std::size_t k, std::mt19937_64& rng )
{
	if( pool.size() <= k ) {
		return pool;
	}
	for( std::size_t i = 0; i < k; ++i ) {
		std::uniform_int_distribution<std::size_t> pick( i, pool.size() - 1 );
		std::swap( pool[i], pool[pick( rng )] );
	}
	pool.resize( k );
	std::sort( pool.begin(), pool.end() );
	return pool;
}

} // namespace

void ContrastiveConfig::validate() const
{
	if( !( tau > 0 && tau <= 1 ) ) {
		throw ArgumentError( "contrastive: tau must be in (0, 1]" );
	}
	if( !( margin >= 0 && margin < 1 ) ) {
		throw ArgumentError( "contrastive: margin must be in [0, 1)" );
	}
	if( !( alpha >= 0 && alpha <= 1 ) ) {
		throw ArgumentError( "contrastive: alpha must be in [0, 1]" );
	}
	if( exclusion_radius < 1 || !( balance >= 0 ) ) {
		throw ArgumentError( "contrastive: exclusion radius must be >= 1 and balance >= 0" );
	}
}

int patch_margin( std::size_t dim, int patch )
{
	const std::size_t interior = dim / static_cast<std::size_t>( patch ) * static_cast<std::size_t>( patch );
	return static_cast<int>( ( dim - interior ) / 2 );
}

PatchGrid compute_patch_fractions( const Plane<std::uint8_t>& labels, int patch, CancerDefinition cancer, double tau )
{
	if( patch < 1 ) {
		throw ArgumentError( "patch size must be >= 1" );
	}
	PatchGrid grid;
	grid.patch = patch;
	grid.rows = static_cast<int>( labels.height / static_cast<std::size_t>( patch ) );
	grid.cols = static_cast<int>( labels.width / static_cast<std::size_t>( patch ) );
	const int my = patch_margin( labels.height, patch );
	const int mx = patch_margin( labels.width, patch );
	const double n = static_cast<double>( patch ) * patch;
	const std::uint8_t firstCancer = cancer == CancerDefinition::CsPCaOnly ? kCsPCa : kIndolent;
	grid.rho_c.resize( static_cast<std::size_t>( grid.rows ) * grid.cols );
	grid.rho_g.resize( grid.rho_c.size() );
	grid.cls.resize( grid.rho_c.size() );
	for( int r = 0; r < grid.rows; ++r ) {
		for( int c = 0; c < grid.cols; ++c ) {
			int nc = 0;
			int ng = 0;
			for( int y = 0; y < patch; ++y ) {
				for( int x = 0; x < patch; ++x ) {
					const std::uint8_t l = labels.at( my + r * patch + y, mx + c * patch + x );
					if( l >= firstCancer ) {
						++nc;
					} else if( is_gland( l ) ) {
						++ng;
					}
				}
			}
			const int i = grid.index( r, c );
			grid.rho_c[i] = nc / n;
			grid.rho_g[i] = ng / n;
			if( grid.rho_c[i] >= tau - kThresholdSlack ) {
				grid.cls[i] = PatchClass::Cancer;
			} else if( grid.rho_g[i] >= tau - kThresholdSlack ) {
				grid.cls[i] = PatchClass::NormalGland;
			} else {
				grid.cls[i] = PatchClass::Excluded;
			}
		}
	}
	return grid;
}

int chebyshev( const PatchGrid& grid, int a, int b )
{
	return std::max( std::abs( a / grid.cols - b / grid.cols ), std::abs( a % grid.cols - b % grid.cols ) );
}

PairSet sample_pairs( const PatchGrid& grid, const ContrastiveConfig& cfg, std::uint64_t seed )
{
	cfg.validate();
	PairSet out;
	std::vector<int> cancer;
	std::vector<int> normal;
	std::vector<int> touched; // any cancer pixels
	for( int i = 0; i < static_cast<int>( grid.size() ); ++i ) {
		if( grid.cls[i] == PatchClass::Cancer ) {
			cancer.push_back( i );
		} else if( grid.cls[i] == PatchClass::NormalGland ) {
			normal.push_back( i );
		}
		if( grid.rho_c[i] > 0 ) {
			touched.push_back( i );
		}
	}
	if( cancer.empty() ) {
		return out;
	}

	auto adjacentPairs = [&]( const std::vector<int>& members, PatchClass cls ) {
		std::vector<PatchPair> pairs;
		for( int a : members ) {
			const int r = a / grid.cols;
			const int c = a % grid.cols;
			for( int dr = -1; dr <= 1; ++dr ) {
				for( int dc = -1; dc <= 1; ++dc ) {
					const int rr = r + dr;
					const int cc = c + dc;
					if( ( dr == 0 && dc == 0 ) || rr < 0 || cc < 0 || rr >= grid.rows || cc >= grid.cols ) {
						continue;
					}
					const int t = grid.index( rr, cc );
					if( t > a && grid.cls[t] == cls ) {
						pairs.push_back( { a, t } );
					}
				}
			}
		}
		return pairs;
	};

	out.positives = adjacentPairs( cancer, PatchClass::Cancer );

	std::vector<int> eligible;
	for( int t : normal ) {
		bool clear = true;
		for( int u : touched ) {
			if( chebyshev( grid, t, u ) < cfg.exclusion_radius ) {
				clear = false;
				break;
			}
		}
		if( clear ) {
			eligible.push_back( t );
		}
	}
	std::vector<PatchPair> negatives;
	negatives.reserve( cancer.size() * eligible.size() );
	for( int a : cancer ) {
		for( int t : eligible ) {
			negatives.push_back( { a, t } );
		}
	}

	std::mt19937_64 rng( seed );
	const auto quota = static_cast<std::size_t>( std::floor( cfg.balance * static_cast<double>( out.positives.size() ) + 1e-9 ) );
	out.negatives = undersample( std::move( negatives ), quota, rng );
	if( cfg.normal_positives ) {
		out.normal_positives = undersample( adjacentPairs( normal, PatchClass::NormalGland ), out.positives.size(), rng );
	}
	return out;
}

nlohmann::json to_json( const PairSet& pairs )
{
	auto list = []( const std::vector<PatchPair>& v ) {
		nlohmann::json a = nlohmann::json::array();
		for( const auto& p : v ) {
			a.push_back( { p.anchor, p.target } );
		}
		return a;
	};
	return { { "positives", list( pairs.positives ) }, { "negatives", list( pairs.negatives ) },
		{ "normal_positives", list( pairs.normal_positives ) } };
}

PairSet pairs_from_json( const nlohmann::json& j )
{
	auto list = [&]( const char* key ) {
		std::vector<PatchPair> v;
		if( j.contains( key ) ) {
			for( const auto& p : j.at( key ) ) {
				v.push_back( { p.at( 0 ).get<int>(), p.at( 1 ).get<int>() } );
			}
		}
		return v;
	};
	return { list( "positives" ), list( "negatives" ), list( "normal_positives" ) };
}

double cosine_similarity( std::span<const double> a, std::span<const double> b, bool* degenerate )
{
	if( a.size() != b.size() ) {
		throw ArgumentError( "cosine_similarity: vector lengths differ" );
	}
	double dot = 0, na = 0, nb = 0;
	for( std::size_t i = 0; i < a.size(); ++i ) {
		dot += a[i] * b[i];
		na += a[i] * a[i];
		nb += b[i] * b[i];
	}
	na = std::sqrt( na );
	nb = std::sqrt( nb );
	if( degenerate != nullptr ) {
		*degenerate = na <= kEps && nb <= kEps;
	}
	return dot / ( std::max( na, kEps ) * std::max( nb, kEps ) );
}

double contrastive_loss( const PairSet& pairs, const ag::Matrix<double>& embeddings, double margin )
{
	if( pairs.empty() ) {
		return 0.0;
	}
	auto sim = [&]( const PatchPair& p ) {
		if( p.anchor < 0 || p.target < 0 || p.anchor >= embeddings.rows() || p.target >= embeddings.rows() ) {
			throw ArgumentError( "contrastive_loss: pair index out of range" );
		}
		const auto ra = embeddings.row( p.anchor );
		const auto rt = embeddings.row( p.target );
		return cosine_similarity( { ra.data(), static_cast<std::size_t>( ra.size() ) }, { rt.data(), static_cast<std::size_t>( rt.size() ) } );
	};
	double total = 0;
	for( const auto& p : pairs.positives ) {
		total += 1.0 - sim( p );
	}
	for( const auto& p : pairs.normal_positives ) {
		total += 1.0 - sim( p );
	}
	for( const auto& p : pairs.negatives ) {
		total += std::max( 0.0, sim( p ) - margin );
	}
	return total / static_cast<double>( pairs.size() );
}

double combined_loss( double segLoss, double contrastiveLoss, double alpha )
{
	return ( 1.0 - alpha ) * segLoss + alpha * contrastiveLoss;
}

template<typename T>
ag::Var<T> contrastive_loss_sum( const PairSet& pairs, const ag::Var<T>& embeddings, T margin, std::size_t* count )
{
	struct Term {
		PatchPair pair;
		bool positive;
	};
	std::vector<Term> terms;
	for( const auto& p : pairs.positives ) {
		terms.push_back( { p, true } );
	}
	for( const auto& p : pairs.normal_positives ) {
		terms.push_back( { p, true } );
	}
	for( const auto& p : pairs.negatives ) {
		terms.push_back( { p, false } );
	}
	if( count != nullptr ) {
		*count = terms.size();
	}
	const ag::Matrix<T>& z = embeddings.value();
	for( const Term& t : terms ) {
		if( t.pair.anchor < 0 || t.pair.target < 0 || t.pair.anchor >= z.rows() || t.pair.target >= z.rows() ) {
			throw ArgumentError( "contrastive_loss: pair index out of range" );
		}
	}
	const T eps = static_cast<T>( kEps );
	Eigen::Matrix<T, Eigen::Dynamic, 1> norms = z.rowwise().norm().array().max( eps ).matrix();
	std::vector<T> sims( terms.size() );
	ag::Matrix<T> total = ag::Matrix<T>::Zero( 1, 1 );
	for( std::size_t i = 0; i < terms.size(); ++i ) {
		const auto& p = terms[i].pair;
		sims[i] = z.row( p.anchor ).dot( z.row( p.target ) ) / ( norms( p.anchor ) * norms( p.target ) );
		total( 0, 0 ) += terms[i].positive ? T( 1 ) - sims[i] : std::max( T( 0 ), sims[i] - margin );
	}
	return ag::custom_op<T>( std::move( total ), { embeddings },
		[embeddings, terms = std::move( terms ), sims = std::move( sims ), norms = std::move( norms ), margin]( const ag::Matrix<T>& g ) {
			const ag::Matrix<T>& z = embeddings.value();
			ag::Matrix<T> dz = ag::Matrix<T>::Zero( z.rows(), z.cols() );
			for( std::size_t i = 0; i < terms.size(); ++i ) {
				T coeff;
				if( terms[i].positive ) {
					coeff = -g( 0, 0 );
				} else if( sims[i] > margin ) {
					coeff = g( 0, 0 );
				} else {
					continue;
				}
				const int a = terms[i].pair.anchor;
				const int t = terms[i].pair.target;
				const T na = norms( a );
				const T nt = norms( t );
				const T s = sims[i];
				dz.row( a ) += coeff * ( z.row( t ) / ( na * nt ) - s * z.row( a ) / ( na * na ) );
				dz.row( t ) += coeff * ( z.row( a ) / ( na * nt ) - s * z.row( t ) / ( nt * nt ) );
			}
			embeddings.node()->accumulate( dz );
		} );
}

template<typename T>
ag::Var<T> contrastive_loss( const PairSet& pairs, const ag::Var<T>& embeddings, T margin )
{
	std::size_t count = 0;
	ag::Var<T> sum = contrastive_loss_sum( pairs, embeddings, margin, &count );
	return count == 0 ? sum : ag::scale( sum, T( 1 ) / static_cast<T>( count ) );
}

template<typename T>
ag::Var<T> combined_loss( const ag::Var<T>& segLoss, const ag::Var<T>& contrastiveLoss, T alpha )
{
	return ag::add_scalars<T>( { segLoss, contrastiveLoss }, { T( 1 ) - alpha, alpha } );
}

void ProjectionHeadConfig::validate() const
{
	if( input_dim < 1 || hidden_dim < 1 || bottleneck_dim < 1 || output_dim < 1 ) {
		throw ArgumentError( "projection head dimensions must be >= 1" );
	}
}

template<typename T>
ProjectionHead<T>::ProjectionHead( const ProjectionHeadConfig& cfg, ParameterStore<T>& store, std::mt19937_64& rng, const std::string& prefix ) :
	cfg_( cfg )
{
	cfg.validate();
	const int dims[4] = { cfg.input_dim, cfg.hidden_dim, cfg.hidden_dim, cfg.bottleneck_dim };
	for( int l = 0; l < 3; ++l ) {
		const std::string n = prefix + "mlp" + std::to_string( l ) + ".";
		w_.push_back( store.add( n + "weight", trunc_normal<T>( rng, dims[l], dims[l + 1], 0.02 ), ParamGroup::Head ) );
		b_.push_back( store.add( n + "bias", ag::Matrix<T>::Zero( 1, dims[l + 1] ), ParamGroup::Head ) );
		if( l < 2 ) {
			gamma_.push_back( store.add( n + "bn.weight", ag::Matrix<T>::Ones( 1, dims[l + 1] ), ParamGroup::Head ) );
			beta_.push_back( store.add( n + "bn.bias", ag::Matrix<T>::Zero( 1, dims[l + 1] ), ParamGroup::Head ) );
			bn_.emplace_back();
			bn_.back().running_mean = ag::Matrix<T>::Zero( 1, dims[l + 1] );
			bn_.back().running_var = ag::Matrix<T>::Ones( 1, dims[l + 1] );
		}
	}
	v_ = store.add( prefix + "last.weight_v", trunc_normal<T>( rng, cfg.output_dim, cfg.bottleneck_dim, 0.02 ), ParamGroup::Head );
	g_ = store.add( prefix + "last.weight_g", ag::Matrix<T>::Ones( 1, cfg.output_dim ), ParamGroup::Head );
}

template<typename T>
typename ProjectionHead<T>::Output ProjectionHead<T>::forward( const ag::Var<T>& x, bool training )
{
	if( x.cols() != cfg_.input_dim ) {
		throw ArgumentError( "projection head expects " + std::to_string( cfg_.input_dim ) + " input features, got " +
			std::to_string( x.cols() ) );
	}
	ag::Var<T> h = x;
	for( int l = 0; l < 3; ++l ) {
		h = ag::linear( h, w_[l], b_[l] );
		if( l < 2 ) {
			h = ag::gelu( ag::batch_norm( h, gamma_[l], beta_[l], bn_[l], training ) );
		}
	}
	Output out;
	out.normalized = ag::l2_normalize_rows( h, static_cast<T>( kEps ) );
	out.embedding = ag::weight_norm_linear( out.normalized, v_, g_, static_cast<T>( kEps ) );
	return out;
}

template<typename T>
ag::Var<T> project( ProjectionHead<T>& head, const ag::Var<T>& tokens, bool training )
{
	return head.forward( tokens, training ).embedding;
}

template ag::Var<float> contrastive_loss_sum<float>( const PairSet&, const ag::Var<float>&, float, std::size_t* );
template ag::Var<double> contrastive_loss_sum<double>( const PairSet&, const ag::Var<double>&, double, std::size_t* );
template ag::Var<float> contrastive_loss<float>( const PairSet&, const ag::Var<float>&, float );
template ag::Var<double> contrastive_loss<double>( const PairSet&, const ag::Var<double>&, double );
template ag::Var<float> combined_loss<float>( const ag::Var<float>&, const ag::Var<float>&, float );
template ag::Var<double> combined_loss<double>( const ag::Var<double>&, const ag::Var<double>&, double );
template class ProjectionHead<float>;
template class ProjectionHead<double>;
template ag::Var<float> project<float>( ProjectionHead<float>&, const ag::Var<float>&, bool );
template ag::Var<double> project<double>( ProjectionHead<double>&, const ag::Var<double>&, bool );

} // namespace provit
