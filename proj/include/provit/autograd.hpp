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

// Minimal reverse-mode automatic differentiation over dense row-major matrices.
// Every value is a 2D matrix; images are stored as (pixels x channels) and
// token sequences as (tokens x features). Ops record a backward closure only
// when some input requires a gradient and gradient recording is enabled.

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <vector>

#include <Eigen/Dense>

namespace provit::ag {

template<typename T>
using Matrix = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template<typename T>
using RowVector = Eigen::Matrix<T, 1, Eigen::Dynamic, Eigen::RowMajor>;

template<typename T>
struct Node {
	Matrix<T> value;
	Matrix<T> grad;
	bool requires_grad = false;
	std::vector<std::shared_ptr<Node>> parents;
	// Receives d(loss)/d(value) and accumulates into the inputs.
	std::function<void( const Matrix<T>& )> backward;

	void accumulate( const Matrix<T>& g )
	{
		if( grad.size() == 0 ) {
			grad = g;
		} else {
			grad += g;
		}
	}
	void zero_grad() { grad.resize( 0, 0 ); }
};

template<typename T>
class Var {
public:
	Var() = default;
	explicit Var( std::shared_ptr<Node<T>> n ) : node_( std::move( n ) ) {}

	const Matrix<T>& value() const { return node_->value; }
	Matrix<T>& mutable_value() { return node_->value; }
	const Matrix<T>& grad() const { return node_->grad; }
	Eigen::Index rows() const { return node_->value.rows(); }
	Eigen::Index cols() const { return node_->value.cols(); }
	bool requires_grad() const { return node_ && node_->requires_grad; }
	// Value of a 1x1 result.
	T item() const { return node_->value( 0, 0 ); }
	const std::shared_ptr<Node<T>>& node() const { return node_; }
	explicit operator bool() const { return static_cast<bool>( node_ ); }

private:
	std::shared_ptr<Node<T>> node_;
};

// Thread-local switch; inference runs with recording disabled.
bool grad_enabled();
class NoGradGuard {
public:
	NoGradGuard();
	~NoGradGuard();
	NoGradGuard( const NoGradGuard& ) = delete;
	NoGradGuard& operator=( const NoGradGuard& ) = delete;

private:
	bool previous_;
};

template<typename T>
Var<T> constant( Matrix<T> value );
// Leaf whose gradient is accumulated across backward passes (a parameter).
template<typename T>
Var<T> leaf( Matrix<T> value, bool requiresGrad = true );

// Records an op whose backward closure is supplied by the caller. The closure
// is only stored (and the inputs retained) when some input requires a gradient.
template<typename T>
Var<T> custom_op( Matrix<T> value, const std::vector<Var<T>>& inputs, std::function<void( const Matrix<T>& )> backwardFn );

// Seeds d(loss)/d(loss) = 1 and propagates to every reachable node.
template<typename T>
void backward( const Var<T>& loss );

template<typename T>
Var<T> matmul( const Var<T>& a, const Var<T>& b );
// a * b^T
template<typename T>
Var<T> matmul_nt( const Var<T>& a, const Var<T>& b );
template<typename T>
Var<T> add( const Var<T>& a, const Var<T>& b );
template<typename T>
Var<T> sub( const Var<T>& a, const Var<T>& b );
template<typename T>
Var<T> scale( const Var<T>& a, T s );
// Adds a 1 x cols row to every row.
template<typename T>
Var<T> add_row( const Var<T>& a, const Var<T>& row );
// x * w + b with w stored (in x out) and b (1 x out); b may be empty.
template<typename T>
Var<T> linear( const Var<T>& x, const Var<T>& w, const Var<T>& b );
template<typename T>
Var<T> gelu( const Var<T>& x );
template<typename T>
Var<T> layer_norm( const Var<T>& x, const Var<T>& gamma, const Var<T>& beta, T eps = T( 1e-6 ) );
template<typename T>
Var<T> softmax_rows( const Var<T>& x );
// Multi-head scaled dot-product self-attention on (tokens x dim) projections.
template<typename T>
Var<T> attention( const Var<T>& q, const Var<T>& k, const Var<T>& v, int heads );

template<typename T>
struct BatchNormState {
	Matrix<T> running_mean;
	Matrix<T> running_var;
	T momentum = T( 0.1 );
	T eps = T( 1e-5 );
};
// Training mode normalizes with batch statistics (biased variance) and updates
// the running estimates; evaluation mode uses the running estimates.
template<typename T>
Var<T> batch_norm( const Var<T>& x, const Var<T>& gamma, const Var<T>& beta, BatchNormState<T>& state, bool training );

template<typename T>
Var<T> l2_normalize_rows( const Var<T>& x, T eps = T( 1e-12 ) );
// x * W^T where row j of W is g_j * v_j / ||v_j||; v is (out x in), g is (1 x out).
template<typename T>
Var<T> weight_norm_linear( const Var<T>& x, const Var<T>& v, const Var<T>& g, T eps = T( 1e-12 ) );

template<typename T>
Var<T> gather_rows( const Var<T>& x, std::span<const int> rows );
template<typename T>
Var<T> slice_rows( const Var<T>& x, Eigen::Index start, Eigen::Index count );
template<typename T>
Var<T> concat_cols( const std::vector<Var<T>>& parts );
template<typename T>
Var<T> sum_all( const Var<T>& x );
template<typename T>
Var<T> add_scalars( const std::vector<Var<T>>& parts, const std::vector<T>& weights );

// Non-overlapping transposed convolution output rearrangement: a (g*g) x (k*k*c)
// token map becomes a (g*k)^2 x c image.
template<typename T>
Var<T> tokens_to_image( const Var<T>& x, int grid, int kernel, int channels );
// Bilinear x2 upsampling (half-pixel centers, edge clamped) of an (h*w) x c image.
template<typename T>
Var<T> upsample2x( const Var<T>& x, int height, int width );
// 3x3 convolution with zero padding; w is (9*cin) x cout laid out (ky, kx, cin).
template<typename T>
Var<T> conv3x3( const Var<T>& x, int height, int width, const Var<T>& w, const Var<T>& b );

} // namespace provit::ag
