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

#include "provit/autograd.hpp"

#include <cmath>
#include <numbers>
#include <unordered_set>

#include <unsupported/Eigen/SpecialFunctions>

#include "provit/error.hpp"

namespace provit::ag {

namespace {

thread_local bool gradMode = true;

template<typename T>
bool needs_grad( std::initializer_list<const Var<T>*> inputs )
{
	if( !gradMode ) {
		return false;
	}
	for( const Var<T>* v : inputs ) {
		if( v != nullptr && *v && v->requires_grad() ) {
			return true;
		}
	}
	return false;
}

template<typename T>
Var<T> result( Matrix<T> value )
{
	auto n = std::make_shared<Node<T>>();
	n->value = std::move( value );
	return Var<T>( std::move( n ) );
}

template<typename T>
Var<T> record( Matrix<T> value, std::initializer_list<const Var<T>*> inputs, std::function<void( const Matrix<T>& )> fn )
{
	auto n = std::make_shared<Node<T>>();
	n->value = std::move( value );
	n->requires_grad = true;
	for( const Var<T>* v : inputs ) {
		if( v != nullptr && *v && v->requires_grad() ) {
			n->parents.push_back( v->node() );
		}
	}
	n->backward = std::move( fn );
	return Var<T>( std::move( n ) );
}

template<typename T>
void acc( const Var<T>& v, const Matrix<T>& g )
{
	if( v && v.requires_grad() ) {
		v.node()->accumulate( g );
	}
}

void check( bool condition, const char* message )
{
	if( !condition ) {
		throw ArgumentError( message );
	}
}

} // namespace

bool grad_enabled()
{
	return gradMode;
}

NoGradGuard::NoGradGuard() : previous_( gradMode )
{
	gradMode = false;
}

NoGradGuard::~NoGradGuard()
{
	gradMode = previous_;
}

template<typename T>
Var<T> constant( Matrix<T> value )
{
	return result<T>( std::move( value ) );
}

template<typename T>
Var<T> leaf( Matrix<T> value, bool requiresGrad )
{
	auto n = std::make_shared<Node<T>>();
	n->value = std::move( value );
	n->requires_grad = requiresGrad;
	return Var<T>( std::move( n ) );
}

template<typename T>
Var<T> custom_op( Matrix<T> value, const std::vector<Var<T>>& inputs, std::function<void( const Matrix<T>& )> backwardFn )
{
	bool any = false;
	if( gradMode ) {
		for( const Var<T>& v : inputs ) {
			any = any || ( v && v.requires_grad() );
		}
	}
	if( !any ) {
		return result<T>( std::move( value ) );
	}
	auto n = std::make_shared<Node<T>>();
	n->value = std::move( value );
	n->requires_grad = true;
	for( const Var<T>& v : inputs ) {
		if( v && v.requires_grad() ) {
			n->parents.push_back( v.node() );
		}
	}
	n->backward = std::move( backwardFn );
	return Var<T>( std::move( n ) );
}

template<typename T>
void backward( const Var<T>& loss )
{
	if( !loss.requires_grad() ) {
		return;
	}
	// Iterative post-order DFS gives a topological order.
	std::vector<Node<T>*> order;
	std::unordered_set<Node<T>*> seen;
	std::vector<std::pair<Node<T>*, std::size_t>> stack;
	stack.emplace_back( loss.node().get(), 0 );
	seen.insert( loss.node().get() );
	while( !stack.empty() ) {
		auto& [node, next] = stack.back();
		if( next < node->parents.size() ) {
			Node<T>* p = node->parents[next++].get();
			if( seen.insert( p ).second ) {
				stack.emplace_back( p, 0 );
			}
			continue;
		}
		order.push_back( node );
		stack.pop_back();
	}
	Node<T>* root = loss.node().get();
	root->accumulate( Matrix<T>::Ones( root->value.rows(), root->value.cols() ) );
	for( auto it = order.rbegin(); it != order.rend(); ++it ) {
		Node<T>* n = *it;
		if( !n->backward ) {
			continue;
		}
		if( n->grad.size() != 0 ) {
			n->backward( n->grad );
		}
		// Interior nodes are single-use: release saved tensors as we go.
		n->backward = nullptr;
		n->grad.resize( 0, 0 );
	}
}

template<typename T>
Var<T> matmul( const Var<T>& a, const Var<T>& b )
{
	check( a.cols() == b.rows(), "matmul: inner dimensions differ" );
	Matrix<T> out = a.value() * b.value();
	if( !needs_grad<T>( { &a, &b } ) ) {
		return result<T>( std::move( out ) );
	}
	return record<T>( std::move( out ), { &a, &b }, [a, b]( const Matrix<T>& g ) {
		if( a.requires_grad() ) {
			acc( a, Matrix<T>( g * b.value().transpose() ) );
		}
		if( b.requires_grad() ) {
			acc( b, Matrix<T>( a.value().transpose() * g ) );
		}
	} );
}

template<typename T>
Var<T> matmul_nt( const Var<T>& a, const Var<T>& b )
{
	check( a.cols() == b.cols(), "matmul_nt: inner dimensions differ" );
	Matrix<T> out = a.value() * b.value().transpose();
	if( !needs_grad<T>( { &a, &b } ) ) {
		return result<T>( std::move( out ) );
	}
	return record<T>( std::move( out ), { &a, &b }, [a, b]( const Matrix<T>& g ) {
		if( a.requires_grad() ) {
			acc( a, Matrix<T>( g * b.value() ) );
		}
		if( b.requires_grad() ) {
			acc( b, Matrix<T>( g.transpose() * a.value() ) );
		}
	} );
}

template<typename T>
Var<T> add( const Var<T>& a, const Var<T>& b )
{
	check( a.rows() == b.rows() && a.cols() == b.cols(), "add: shape mismatch" );
	Matrix<T> out = a.value() + b.value();
	if( !needs_grad<T>( { &a, &b } ) ) {
		return result<T>( std::move( out ) );
	}
	return record<T>( std::move( out ), { &a, &b }, [a, b]( const Matrix<T>& g ) {
		acc( a, g );
		acc( b, g );
	} );
}

template<typename T>
Var<T> sub( const Var<T>& a, const Var<T>& b )
{
	check( a.rows() == b.rows() && a.cols() == b.cols(), "sub: shape mismatch" );
	Matrix<T> out = a.value() - b.value();
	if( !needs_grad<T>( { &a, &b } ) ) {
		return result<T>( std::move( out ) );
	}
	return record<T>( std::move( out ), { &a, &b }, [a, b]( const Matrix<T>& g ) {
		acc( a, g );
		if( b.requires_grad() ) {
			acc( b, Matrix<T>( -g ) );
		}
	} );
}

template<typename T>
Var<T> scale( const Var<T>& a, T s )
{
	Matrix<T> out = a.value() * s;
	if( !needs_grad<T>( { &a } ) ) {
		return result<T>( std::move( out ) );
	}
	return record<T>( std::move( out ), { &a }, [a, s]( const Matrix<T>& g ) { acc( a, Matrix<T>( g * s ) ); } );
}

template<typename T>
Var<T> add_row( const Var<T>& a, const Var<T>& row )
{
	check( row.rows() == 1 && row.cols() == a.cols(), "add_row: row shape mismatch" );
	Matrix<T> out = a.value();
	out.rowwise() += row.value().row( 0 );
	if( !needs_grad<T>( { &a, &row } ) ) {
		return result<T>( std::move( out ) );
	}
	return record<T>( std::move( out ), { &a, &row }, [a, row]( const Matrix<T>& g ) {
		acc( a, g );
		if( row.requires_grad() ) {
			acc( row, Matrix<T>( g.colwise().sum() ) );
		}
	} );
}

template<typename T>
Var<T> linear( const Var<T>& x, const Var<T>& w, const Var<T>& b )
{
	check( x.cols() == w.rows(), "linear: input width does not match weight rows" );
	Matrix<T> out = x.value() * w.value();
	if( b ) {
		check( b.rows() == 1 && b.cols() == w.cols(), "linear: bias shape mismatch" );
		out.rowwise() += b.value().row( 0 );
	}
	if( !needs_grad<T>( { &x, &w, &b } ) ) {
		return result<T>( std::move( out ) );
	}
	return record<T>( std::move( out ), { &x, &w, &b }, [x, w, b]( const Matrix<T>& g ) {
		if( x.requires_grad() ) {
			acc( x, Matrix<T>( g * w.value().transpose() ) );
		}
		if( w.requires_grad() ) {
			acc( w, Matrix<T>( x.value().transpose() * g ) );
		}
		if( b && b.requires_grad() ) {
			acc( b, Matrix<T>( g.colwise().sum() ) );
		}
	} );
}

template<typename T>
Var<T> gelu( const Var<T>& x )
{
	const T invSqrt2 = T( 1 ) / std::sqrt( T( 2 ) );
	Matrix<T> cdf = ( T( 0.5 ) * ( T( 1 ) + ( x.value().array() * invSqrt2 ).erf() ) ).matrix();
	Matrix<T> out = ( x.value().array() * cdf.array() ).matrix();
	if( !needs_grad<T>( { &x } ) ) {
		return result<T>( std::move( out ) );
	}
	return record<T>( std::move( out ), { &x }, [x, cdf = std::move( cdf )]( const Matrix<T>& g ) {
		const T invSqrt2Pi = T( 1 ) / std::sqrt( T( 2 ) * std::numbers::pi_v<T> );
		const auto& xv = x.value().array();
		Matrix<T> d = ( g.array() * ( cdf.array() + xv * ( -T( 0.5 ) * xv.square() ).exp() * invSqrt2Pi ) ).matrix();
		acc( x, d );
	} );
}

template<typename T>
Var<T> layer_norm( const Var<T>& x, const Var<T>& gamma, const Var<T>& beta, T eps )
{
	const Eigen::Index n = x.rows();
	const Eigen::Index d = x.cols();
	check( gamma.cols() == d && beta.cols() == d, "layer_norm: affine shape mismatch" );
	Matrix<T> xhat( n, d );
	Eigen::Matrix<T, Eigen::Dynamic, 1> invStd( n );
	for( Eigen::Index r = 0; r < n; ++r ) {
		const auto row = x.value().row( r ).array();
		const T mean = row.mean();
		const T var = ( row - mean ).square().mean();
		invStd( r ) = T( 1 ) / std::sqrt( var + eps );
		xhat.row( r ) = ( ( row - mean ) * invStd( r ) ).matrix();
	}
	Matrix<T> out = ( xhat.array().rowwise() * gamma.value().row( 0 ).array() ).matrix();
	out.rowwise() += beta.value().row( 0 );
	if( !needs_grad<T>( { &x, &gamma, &beta } ) ) {
		return result<T>( std::move( out ) );
	}
	return record<T>( std::move( out ), { &x, &gamma, &beta },
		[x, gamma, beta, xhat = std::move( xhat ), invStd = std::move( invStd )]( const Matrix<T>& g ) {
			if( gamma.requires_grad() ) {
				acc( gamma, Matrix<T>( ( g.array() * xhat.array() ).colwise().sum().matrix() ) );
			}
			if( beta.requires_grad() ) {
				acc( beta, Matrix<T>( g.colwise().sum() ) );
			}
			if( x.requires_grad() ) {
				Matrix<T> dxhat = ( g.array().rowwise() * gamma.value().row( 0 ).array() ).matrix();
				Matrix<T> dx( dxhat.rows(), dxhat.cols() );
				for( Eigen::Index r = 0; r < dxhat.rows(); ++r ) {
					const T m1 = dxhat.row( r ).mean();
					const T m2 = ( dxhat.row( r ).array() * xhat.row( r ).array() ).mean();
					dx.row( r ) = ( ( dxhat.row( r ).array() - m1 - xhat.row( r ).array() * m2 ) * invStd( r ) ).matrix();
				}
				acc( x, dx );
			}
		} );
}

namespace {

template<typename T, typename Derived>
void softmax_inplace( Eigen::MatrixBase<Derived>& m )
{
	for( Eigen::Index r = 0; r < m.rows(); ++r ) {
		auto row = m.row( r );
		const T mx = row.maxCoeff();
		row = ( row.array() - mx ).exp().matrix();
		row /= row.sum();
	}
}

} // namespace

template<typename T>
Var<T> softmax_rows( const Var<T>& x )
{
	Matrix<T> out = x.value();
	softmax_inplace<T>( out );
	if( !needs_grad<T>( { &x } ) ) {
		return result<T>( std::move( out ) );
	}
	Matrix<T> saved = out;
	return record<T>( std::move( out ), { &x }, [x, y = std::move( saved )]( const Matrix<T>& g ) {
		Matrix<T> gy = ( g.array() * y.array() ).matrix();
		Eigen::Matrix<T, Eigen::Dynamic, 1> dot = gy.rowwise().sum();
		Matrix<T> dx = gy - ( y.array().colwise() * dot.array() ).matrix();
		acc( x, dx );
	} );
}

template<typename T>
Var<T> attention( const Var<T>& q, const Var<T>& k, const Var<T>& v, int heads )
{
	const Eigen::Index n = q.rows();
	const Eigen::Index d = q.cols();
	check( heads > 0 && d % heads == 0, "attention: dim not divisible by heads" );
	check( k.rows() == n && v.rows() == n && k.cols() == d && v.cols() == d, "attention: q/k/v shape mismatch" );
	const Eigen::Index dh = d / heads;
	const T scaleFactor = T( 1 ) / std::sqrt( static_cast<T>( dh ) );
	const bool grad = needs_grad<T>( { &q, &k, &v } );
	Matrix<T> out( n, d );
	std::vector<Matrix<T>> probs;
	if( grad ) {
		probs.resize( heads );
	}
	Matrix<T> p( n, n );
	for( int h = 0; h < heads; ++h ) {
		const Eigen::Index c = h * dh;
		p.noalias() = q.value().middleCols( c, dh ) * k.value().middleCols( c, dh ).transpose();
		p *= scaleFactor;
		softmax_inplace<T>( p );
		out.middleCols( c, dh ).noalias() = p * v.value().middleCols( c, dh );
		if( grad ) {
			probs[h] = p;
		}
	}
	if( !grad ) {
		return result<T>( std::move( out ) );
	}
	return record<T>( std::move( out ), { &q, &k, &v }, [q, k, v, heads, dh, scaleFactor, probs = std::move( probs )]( const Matrix<T>& g ) {
		const Eigen::Index n = q.rows();
		const Eigen::Index d = q.cols();
		Matrix<T> dq = Matrix<T>::Zero( n, d );
		Matrix<T> dk = Matrix<T>::Zero( n, d );
		Matrix<T> dv = Matrix<T>::Zero( n, d );
		Matrix<T> dp( n, n );
		for( int h = 0; h < heads; ++h ) {
			const Eigen::Index c = h * dh;
			const Matrix<T>& p = probs[h];
			const auto gh = g.middleCols( c, dh );
			dv.middleCols( c, dh ).noalias() = p.transpose() * gh;
			dp.noalias() = gh * v.value().middleCols( c, dh ).transpose();
			// Softmax backward, folded with the logit scale.
			Eigen::Matrix<T, Eigen::Dynamic, 1> dot = ( dp.array() * p.array() ).rowwise().sum();
			dp = ( p.array() * ( dp.array().colwise() - dot.array() ) * scaleFactor ).matrix();
			dq.middleCols( c, dh ).noalias() = dp * k.value().middleCols( c, dh );
			dk.middleCols( c, dh ).noalias() = dp.transpose() * q.value().middleCols( c, dh );
		}
		acc( q, dq );
		acc( k, dk );
		acc( v, dv );
	} );
}

template<typename T>
Var<T> batch_norm( const Var<T>& x, const Var<T>& gamma, const Var<T>& beta, BatchNormState<T>& state, bool training )
{
	const Eigen::Index n = x.rows();
	const Eigen::Index d = x.cols();
	check( gamma.cols() == d && beta.cols() == d, "batch_norm: affine shape mismatch" );
	if( state.running_mean.size() != d ) {
		state.running_mean = Matrix<T>::Zero( 1, d );
		state.running_var = Matrix<T>::Ones( 1, d );
	}
	RowVector<T> mean;
	RowVector<T> var;
	if( training ) {
		check( n >= 1, "batch_norm: empty batch" );
		mean = x.value().colwise().mean();
		var = ( x.value().rowwise() - mean ).array().square().colwise().mean().matrix();
		const T unbiased = n > 1 ? static_cast<T>( n ) / static_cast<T>( n - 1 ) : T( 1 );
		state.running_mean = ( T( 1 ) - state.momentum ) * state.running_mean + state.momentum * mean;
		state.running_var = ( T( 1 ) - state.momentum ) * state.running_var + state.momentum * unbiased * var;
	} else {
		mean = state.running_mean;
		var = state.running_var;
	}
	RowVector<T> invStd = ( var.array() + state.eps ).rsqrt().matrix();
	Matrix<T> xhat = ( ( x.value().rowwise() - mean ).array().rowwise() * invStd.array() ).matrix();
	Matrix<T> out = ( xhat.array().rowwise() * gamma.value().row( 0 ).array() ).matrix();
	out.rowwise() += beta.value().row( 0 );
	if( !needs_grad<T>( { &x, &gamma, &beta } ) ) {
		return result<T>( std::move( out ) );
	}
	return record<T>( std::move( out ), { &x, &gamma, &beta },
		[x, gamma, beta, training, xhat = std::move( xhat ), invStd = std::move( invStd )]( const Matrix<T>& g ) {
			if( gamma.requires_grad() ) {
				acc( gamma, Matrix<T>( ( g.array() * xhat.array() ).colwise().sum().matrix() ) );
			}
			if( beta.requires_grad() ) {
				acc( beta, Matrix<T>( g.colwise().sum() ) );
			}
			if( !x.requires_grad() ) {
				return;
			}
			Matrix<T> dxhat = ( g.array().rowwise() * gamma.value().row( 0 ).array() ).matrix();
			if( !training ) {
				acc( x, Matrix<T>( ( dxhat.array().rowwise() * invStd.array() ).matrix() ) );
				return;
			}
			const RowVector<T> m1 = dxhat.colwise().mean();
			const RowVector<T> m2 = ( dxhat.array() * xhat.array() ).colwise().mean().matrix();
			Matrix<T> dx = dxhat;
			dx.rowwise() -= m1;
			dx -= ( xhat.array().rowwise() * m2.array() ).matrix();
			dx = ( dx.array().rowwise() * invStd.array() ).matrix();
			acc( x, dx );
		} );
}

template<typename T>
Var<T> l2_normalize_rows( const Var<T>& x, T eps )
{
	Eigen::Matrix<T, Eigen::Dynamic, 1> norms = x.value().rowwise().norm();
	Eigen::Matrix<T, Eigen::Dynamic, 1> denom = norms.array().max( eps ).matrix();
	Matrix<T> out = ( x.value().array().colwise() / denom.array() ).matrix();
	if( !needs_grad<T>( { &x } ) ) {
		return result<T>( std::move( out ) );
	}
	Matrix<T> y = out;
	return record<T>( std::move( out ), { &x }, [x, y = std::move( y ), norms = std::move( norms ), denom = std::move( denom ), eps]( const Matrix<T>& g ) {
		Matrix<T> dx( g.rows(), g.cols() );
		for( Eigen::Index r = 0; r < g.rows(); ++r ) {
			if( norms( r ) > eps ) {
				const T dot = g.row( r ).dot( y.row( r ) );
				dx.row( r ) = ( g.row( r ) - dot * y.row( r ) ) / denom( r );
			} else {
				dx.row( r ) = g.row( r ) / denom( r );
			}
		}
		acc( x, dx );
	} );
}

template<typename T>
Var<T> weight_norm_linear( const Var<T>& x, const Var<T>& v, const Var<T>& g, T eps )
{
	check( x.cols() == v.cols() && g.rows() == 1 && g.cols() == v.rows(), "weight_norm_linear: shape mismatch" );
	Eigen::Matrix<T, Eigen::Dynamic, 1> norms = v.value().rowwise().norm().array().max( eps ).matrix();
	Matrix<T> u = ( v.value().array().colwise() / norms.array() ).matrix();
	Matrix<T> w = ( u.array().colwise() * g.value().row( 0 ).transpose().array() ).matrix();
	Matrix<T> out = x.value() * w.transpose();
	if( !needs_grad<T>( { &x, &v, &g } ) ) {
		return result<T>( std::move( out ) );
	}
	return record<T>( std::move( out ), { &x, &v, &g },
		[x, v, g, u = std::move( u ), w = std::move( w ), norms = std::move( norms )]( const Matrix<T>& dz ) {
			if( x.requires_grad() ) {
				acc( x, Matrix<T>( dz * w ) );
			}
			if( !v.requires_grad() && !g.requires_grad() ) {
				return;
			}
			Matrix<T> dw = dz.transpose() * x.value();
			Eigen::Matrix<T, Eigen::Dynamic, 1> proj = ( dw.array() * u.array() ).rowwise().sum();
			if( g.requires_grad() ) {
				acc( g, Matrix<T>( proj.transpose() ) );
			}
			if( v.requires_grad() ) {
				Matrix<T> dv = dw - ( u.array().colwise() * proj.array() ).matrix();
				dv = ( dv.array().colwise() * ( g.value().row( 0 ).transpose().array() / norms.array() ) ).matrix();
				acc( v, dv );
			}
		} );
}

template<typename T>
Var<T> gather_rows( const Var<T>& x, std::span<const int> rows )
{
	Matrix<T> out( static_cast<Eigen::Index>( rows.size() ), x.cols() );
	for( std::size_t i = 0; i < rows.size(); ++i ) {
		check( rows[i] >= 0 && rows[i] < x.rows(), "gather_rows: index out of range" );
		out.row( static_cast<Eigen::Index>( i ) ) = x.value().row( rows[i] );
	}
	if( !needs_grad<T>( { &x } ) ) {
		return result<T>( std::move( out ) );
	}
	std::vector<int> idx( rows.begin(), rows.end() );
	return record<T>( std::move( out ), { &x }, [x, idx = std::move( idx )]( const Matrix<T>& g ) {
		Matrix<T> dx = Matrix<T>::Zero( x.rows(), x.cols() );
		for( std::size_t i = 0; i < idx.size(); ++i ) {
			dx.row( idx[i] ) += g.row( static_cast<Eigen::Index>( i ) );
		}
		acc( x, dx );
	} );
}

template<typename T>
Var<T> slice_rows( const Var<T>& x, Eigen::Index start, Eigen::Index count )
{
	check( start >= 0 && count >= 0 && start + count <= x.rows(), "slice_rows: range out of bounds" );
	Matrix<T> out = x.value().middleRows( start, count );
	if( !needs_grad<T>( { &x } ) ) {
		return result<T>( std::move( out ) );
	}
	return record<T>( std::move( out ), { &x }, [x, start, count]( const Matrix<T>& g ) {
		Matrix<T> dx = Matrix<T>::Zero( x.rows(), x.cols() );
		dx.middleRows( start, count ) = g;
		acc( x, dx );
	} );
}

template<typename T>
Var<T> concat_cols( const std::vector<Var<T>>& parts )
{
	check( !parts.empty(), "concat_cols: no inputs" );
	Eigen::Index cols = 0;
	for( const auto& p : parts ) {
		check( p.rows() == parts[0].rows(), "concat_cols: row count mismatch" );
		cols += p.cols();
	}
	Matrix<T> out( parts[0].rows(), cols );
	Eigen::Index c = 0;
	for( const auto& p : parts ) {
		out.middleCols( c, p.cols() ) = p.value();
		c += p.cols();
	}
	return custom_op<T>( std::move( out ), parts, [parts]( const Matrix<T>& g ) {
		Eigen::Index c = 0;
		for( const auto& p : parts ) {
			if( p.requires_grad() ) {
				acc( p, Matrix<T>( g.middleCols( c, p.cols() ) ) );
			}
			c += p.cols();
		}
	} );
}

template<typename T>
Var<T> sum_all( const Var<T>& x )
{
	Matrix<T> out( 1, 1 );
	out( 0, 0 ) = x.value().sum();
	if( !needs_grad<T>( { &x } ) ) {
		return result<T>( std::move( out ) );
	}
	return record<T>( std::move( out ), { &x }, [x]( const Matrix<T>& g ) {
		acc( x, Matrix<T>( Matrix<T>::Constant( x.rows(), x.cols(), g( 0, 0 ) ) ) );
	} );
}

template<typename T>
Var<T> add_scalars( const std::vector<Var<T>>& parts, const std::vector<T>& weights )
{
	check( parts.size() == weights.size(), "add_scalars: weight count mismatch" );
	Matrix<T> out = Matrix<T>::Zero( 1, 1 );
	for( std::size_t i = 0; i < parts.size(); ++i ) {
		check( parts[i].rows() == 1 && parts[i].cols() == 1, "add_scalars: inputs must be 1x1" );
		out( 0, 0 ) += weights[i] * parts[i].item();
	}
	return custom_op<T>( std::move( out ), parts, [parts, weights]( const Matrix<T>& g ) {
		for( std::size_t i = 0; i < parts.size(); ++i ) {
			if( parts[i].requires_grad() ) {
				acc( parts[i], Matrix<T>( Matrix<T>::Constant( 1, 1, g( 0, 0 ) * weights[i] ) ) );
			}
		}
	} );
}

template<typename T>
Var<T> tokens_to_image( const Var<T>& x, int grid, int kernel, int channels )
{
	check( x.rows() == grid * grid && x.cols() == kernel * kernel * channels, "tokens_to_image: shape mismatch" );
	const int side = grid * kernel;
	Matrix<T> out( side * side, channels );
	for( int ti = 0; ti < grid; ++ti ) {
		for( int tj = 0; tj < grid; ++tj ) {
			const auto token = x.value().row( ti * grid + tj );
			for( int ky = 0; ky < kernel; ++ky ) {
				for( int kx = 0; kx < kernel; ++kx ) {
					out.row( ( ti * kernel + ky ) * side + tj * kernel + kx ) = token.segment( ( ky * kernel + kx ) * channels, channels );
				}
			}
		}
	}
	if( !needs_grad<T>( { &x } ) ) {
		return result<T>( std::move( out ) );
	}
	return record<T>( std::move( out ), { &x }, [x, grid, kernel, channels, side]( const Matrix<T>& g ) {
		Matrix<T> dx( x.rows(), x.cols() );
		for( int ti = 0; ti < grid; ++ti ) {
			for( int tj = 0; tj < grid; ++tj ) {
				auto token = dx.row( ti * grid + tj );
				for( int ky = 0; ky < kernel; ++ky ) {
					for( int kx = 0; kx < kernel; ++kx ) {
						token.segment( ( ky * kernel + kx ) * channels, channels ) = g.row( ( ti * kernel + ky ) * side + tj * kernel + kx );
					}
				}
			}
		}
		acc( x, dx );
	} );
}

namespace {

struct UpTap {
	int lo;
	int hi;
	double w;
};

std::vector<UpTap> upsample_taps( int n )
{
	std::vector<UpTap> taps( 2 * n );
	for( int o = 0; o < 2 * n; ++o ) {
		const double s = std::max( 0.0, ( o + 0.5 ) / 2.0 - 0.5 );
		const int lo = std::min( static_cast<int>( s ), n - 1 );
		const int hi = std::min( lo + 1, n - 1 );
		taps[o] = { lo, hi, s - lo };
	}
	return taps;
}

} // namespace

template<typename T>
Var<T> upsample2x( const Var<T>& x, int height, int width )
{
	check( x.rows() == static_cast<Eigen::Index>( height ) * width, "upsample2x: shape mismatch" );
	const auto ty = upsample_taps( height );
	const auto tx = upsample_taps( width );
	const int oh = 2 * height;
	const int ow = 2 * width;
	const Eigen::Index c = x.cols();
	Matrix<T> out( static_cast<Eigen::Index>( oh ) * ow, c );
	for( int oy = 0; oy < oh; ++oy ) {
		const T wy = static_cast<T>( ty[oy].w );
		for( int ox = 0; ox < ow; ++ox ) {
			const T wx = static_cast<T>( tx[ox].w );
			const auto& xv = x.value();
			out.row( oy * ow + ox ) = ( T( 1 ) - wy ) * ( ( T( 1 ) - wx ) * xv.row( ty[oy].lo * width + tx[ox].lo ) + wx * xv.row( ty[oy].lo * width + tx[ox].hi ) ) +
				wy * ( ( T( 1 ) - wx ) * xv.row( ty[oy].hi * width + tx[ox].lo ) + wx * xv.row( ty[oy].hi * width + tx[ox].hi ) );
		}
	}
	if( !needs_grad<T>( { &x } ) ) {
		return result<T>( std::move( out ) );
	}
	return record<T>( std::move( out ), { &x }, [x, ty, tx, width, oh, ow]( const Matrix<T>& g ) {
		Matrix<T> dx = Matrix<T>::Zero( x.rows(), x.cols() );
		for( int oy = 0; oy < oh; ++oy ) {
			const T wy = static_cast<T>( ty[oy].w );
			for( int ox = 0; ox < ow; ++ox ) {
				const T wx = static_cast<T>( tx[ox].w );
				const auto gr = g.row( oy * ow + ox );
				dx.row( ty[oy].lo * width + tx[ox].lo ) += ( T( 1 ) - wy ) * ( T( 1 ) - wx ) * gr;
				dx.row( ty[oy].lo * width + tx[ox].hi ) += ( T( 1 ) - wy ) * wx * gr;
				dx.row( ty[oy].hi * width + tx[ox].lo ) += wy * ( T( 1 ) - wx ) * gr;
				dx.row( ty[oy].hi * width + tx[ox].hi ) += wy * wx * gr;
			}
		}
		acc( x, dx );
	} );
}

template<typename T>
Var<T> conv3x3( const Var<T>& x, int height, int width, const Var<T>& w, const Var<T>& b )
{
	const Eigen::Index cin = x.cols();
	check( x.rows() == static_cast<Eigen::Index>( height ) * width, "conv3x3: shape mismatch" );
	check( w.rows() == 9 * cin, "conv3x3: weight rows must be 9 * input channels" );
	const Eigen::Index pixels = x.rows();
	Matrix<T> cols = Matrix<T>::Zero( pixels, 9 * cin );
	for( int y = 0; y < height; ++y ) {
		for( int xx = 0; xx < width; ++xx ) {
			auto dst = cols.row( y * width + xx );
			for( int ky = 0; ky < 3; ++ky ) {
				const int sy = y + ky - 1;
				if( sy < 0 || sy >= height ) {
					continue;
				}
				for( int kx = 0; kx < 3; ++kx ) {
					const int sx = xx + kx - 1;
					if( sx < 0 || sx >= width ) {
						continue;
					}
					dst.segment( ( ky * 3 + kx ) * cin, cin ) = x.value().row( sy * width + sx );
				}
			}
		}
	}
	Matrix<T> out = cols * w.value();
	if( b ) {
		out.rowwise() += b.value().row( 0 );
	}
	if( !needs_grad<T>( { &x, &w, &b } ) ) {
		return result<T>( std::move( out ) );
	}
	return record<T>( std::move( out ), { &x, &w, &b }, [x, w, b, height, width, cols = std::move( cols )]( const Matrix<T>& g ) {
		if( w.requires_grad() ) {
			acc( w, Matrix<T>( cols.transpose() * g ) );
		}
		if( b && b.requires_grad() ) {
			acc( b, Matrix<T>( g.colwise().sum() ) );
		}
		if( !x.requires_grad() ) {
			return;
		}
		const Eigen::Index cin = x.cols();
		Matrix<T> dcols = g * w.value().transpose();
		Matrix<T> dx = Matrix<T>::Zero( x.rows(), cin );
		for( int y = 0; y < height; ++y ) {
			for( int xx = 0; xx < width; ++xx ) {
				const auto src = dcols.row( y * width + xx );
				for( int ky = 0; ky < 3; ++ky ) {
					const int sy = y + ky - 1;
					if( sy < 0 || sy >= height ) {
						continue;
					}
					for( int kx = 0; kx < 3; ++kx ) {
						const int sx = xx + kx - 1;
						if( sx < 0 || sx >= width ) {
							continue;
						}
						dx.row( sy * width + sx ) += src.segment( ( ky * 3 + kx ) * cin, cin );
					}
				}
			}
		}
		acc( x, dx );
	} );
}

#define PROVIT_INSTANTIATE( T )                                                                                                \
	template Var<T> constant<T>( Matrix<T> );                                                                                  \
	template Var<T> leaf<T>( Matrix<T>, bool );                                                                                \
	template Var<T> custom_op<T>( Matrix<T>, const std::vector<Var<T>>&, std::function<void( const Matrix<T>& )> );           \
	template void backward<T>( const Var<T>& );                                                                                \
	template Var<T> matmul<T>( const Var<T>&, const Var<T>& );                                                                 \
	template Var<T> matmul_nt<T>( const Var<T>&, const Var<T>& );                                                              \
	template Var<T> add<T>( const Var<T>&, const Var<T>& );                                                                    \
	template Var<T> sub<T>( const Var<T>&, const Var<T>& );                                                                    \
	template Var<T> scale<T>( const Var<T>&, T );                                                                              \
	template Var<T> add_row<T>( const Var<T>&, const Var<T>& );                                                                \
	template Var<T> linear<T>( const Var<T>&, const Var<T>&, const Var<T>& );                                                  \
	template Var<T> gelu<T>( const Var<T>& );                                                                                  \
	template Var<T> layer_norm<T>( const Var<T>&, const Var<T>&, const Var<T>&, T );                                           \
	template Var<T> softmax_rows<T>( const Var<T>& );                                                                          \
	template Var<T> attention<T>( const Var<T>&, const Var<T>&, const Var<T>&, int );                                          \
	template Var<T> batch_norm<T>( const Var<T>&, const Var<T>&, const Var<T>&, BatchNormState<T>&, bool );                    \
	template Var<T> l2_normalize_rows<T>( const Var<T>&, T );                                                                  \
	template Var<T> weight_norm_linear<T>( const Var<T>&, const Var<T>&, const Var<T>&, T );                                   \
	template Var<T> gather_rows<T>( const Var<T>&, std::span<const int> );                                                     \
	template Var<T> slice_rows<T>( const Var<T>&, Eigen::Index, Eigen::Index );                                                \
	template Var<T> concat_cols<T>( const std::vector<Var<T>>& );                                                              \
	template Var<T> sum_all<T>( const Var<T>& );                                                                               \
	template Var<T> add_scalars<T>( const std::vector<Var<T>>&, const std::vector<T>& );                                       \
	template Var<T> tokens_to_image<T>( const Var<T>&, int, int, int );                                                        \
	template Var<T> upsample2x<T>( const Var<T>&, int, int );                                                                  \
	template Var<T> conv3x3<T>( const Var<T>&, int, int, const Var<T>&, const Var<T>& );

PROVIT_INSTANTIATE( float )
PROVIT_INSTANTIATE( double )

} // namespace provit::ag
