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

#include "provit/features.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

#include "provit/error.hpp"
#include "provit/preprocess.hpp"

namespace provit {

PcaResult pca_top_components( const Eigen::MatrixXd& features, int k )
{
	if( features.rows() < 3 ) {
		throw ArgumentError( "PCA needs at least 3 feature rows, got " + std::to_string( features.rows() ) );
	}
	if( k < 1 || k > features.cols() ) {
		throw ArgumentError( "PCA component count out of range" );
	}
	PcaResult r;
	r.mean = features.colwise().mean();
	const Eigen::MatrixXd centered = features.rowwise() - r.mean;
	const Eigen::MatrixXd cov = centered.transpose() * centered / static_cast<double>( features.rows() - 1 );
	Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig( cov );
	if( eig.info() != Eigen::Success ) {
		throw NumericError( "covariance eigendecomposition failed" );
	}
	const Eigen::Index d = cov.rows();
	r.eigenvalues = eig.eigenvalues().reverse();
	r.components.resize( k, d );
	for( int c = 0; c < k; ++c ) {
		Eigen::VectorXd v = eig.eigenvectors().col( d - 1 - c );
		Eigen::Index arg;
		v.cwiseAbs().maxCoeff( &arg );
		if( v( arg ) < 0 ) {
			v = -v;
		}
		r.components.row( c ) = v.transpose();
	}
	return r;
}

namespace {

bool patch_in_gland( const LabelVolume& labels, std::size_t z, int row, int col, int patch, int rim )
{
	for( int py = 0; py < patch; ++py ) {
		for( int px = 0; px < patch; ++px ) {
			const std::size_t y = static_cast<std::size_t>( rim + row * patch + py );
			const std::size_t x = static_cast<std::size_t>( rim + col * patch + px );
			if( !is_gland( labels.at( z, y, x ) ) ) {
				return false;
			}
		}
	}
	return true;
}

// Bilinear interpolation of a grid of patch values (patch centers) onto interior pixels.
Plane<float> upsample_patches( const Eigen::MatrixXd& grid, int patch, int rim, std::size_t side )
{
	Plane<float> out( side, side, 0.0f );
	const int g = static_cast<int>( grid.rows() );
	const int interior = g * patch;
	for( int y = 0; y < interior; ++y ) {
		const double u = std::clamp( ( y + 0.5 ) / patch - 0.5, 0.0, g - 1.0 );
		const int y0 = static_cast<int>( std::floor( u ) ), y1 = std::min( y0 + 1, g - 1 );
		const double fy = u - y0;
		for( int x = 0; x < interior; ++x ) {
			const double v = std::clamp( ( x + 0.5 ) / patch - 0.5, 0.0, g - 1.0 );
			const int x0 = static_cast<int>( std::floor( v ) ), x1 = std::min( x0 + 1, g - 1 );
			const double fx = v - x0;
			const double val = ( 1 - fy ) * ( ( 1 - fx ) * grid( y0, x0 ) + fx * grid( y0, x1 ) ) +
				fy * ( ( 1 - fx ) * grid( y1, x0 ) + fx * grid( y1, x1 ) );
			out.at( static_cast<std::size_t>( y + rim ), static_cast<std::size_t>( x + rim ) ) = static_cast<float>( val );
		}
	}
	return out;
}

} // namespace

FeatureExport feature_pca_maps( Model<float>& model, const std::vector<Volume>& sequences, const LabelVolume& labels,
	std::vector<std::size_t> slices )
{
	const ViTConfig& cfg = model.config();
	if( sequences.size() != cfg.sequences.size() ) {
		throw ArgumentError( "feature_pca_maps: sequence count differs from the model" );
	}
	for( const auto& v : sequences ) {
		if( v.shape != labels.shape ) {
			throw ArgumentError( "feature_pca_maps: volume and label geometries differ" );
		}
	}
	if( static_cast<int>( labels.shape.ny ) != cfg.input_hw() || static_cast<int>( labels.shape.nx ) != cfg.input_hw() ) {
		throw ArgumentError( "feature_pca_maps: in-plane size must be " + std::to_string( cfg.input_hw() ) );
	}
	if( slices.empty() ) {
		for( std::size_t z = 0; z < labels.shape.nz; ++z ) {
			const auto s = labels.slice( z );
			if( std::any_of( s.begin(), s.end(), is_gland ) ) {
				slices.push_back( z );
			}
		}
	}
	const int g = cfg.grid(), P = cfg.patch_size, rim = cfg.rim();
	FeatureExport out;
	out.sequences = cfg.sequences;
	std::vector<std::vector<Eigen::MatrixXd>> allTokens( sequences.size() );
	for( std::size_t z : slices ) {
		if( z >= labels.shape.nz ) {
			throw ArgumentError( "feature_pca_maps: slice index out of range" );
		}
		for( int r = 0; r < g; ++r ) {
			for( int c = 0; c < g; ++c ) {
				if( patch_in_gland( labels, z, r, c, P, rim ) ) {
					out.patches.push_back( { static_cast<int>( z ), r, c } );
				}
			}
		}
	}
	if( out.patches.size() < 3 ) {
		throw ArgumentError( "feature_pca_maps: fewer than 3 patches lie fully inside the gland" );
	}
	ag::NoGradGuard guard;
	const bool wasTraining = model.training();
	model.set_training( false );
	for( std::size_t s = 0; s < sequences.size(); ++s ) {
		for( std::size_t z : slices ) {
			const ag::Var<float> tokens = model.center_tokens( model.encode( model.tokenize( slice_window( sequences[s], z ) ) ) );
			allTokens[s].push_back( tokens.value().cast<double>() );
		}
	}
	model.set_training( wasTraining );

	for( std::size_t s = 0; s < sequences.size(); ++s ) {
		Eigen::MatrixXd feats( static_cast<Eigen::Index>( out.patches.size() ), cfg.embed_dim );
		for( std::size_t i = 0; i < out.patches.size(); ++i ) {
			const auto& p = out.patches[i];
			const auto slot = static_cast<std::size_t>( std::find( slices.begin(), slices.end(), static_cast<std::size_t>( p[0] ) ) - slices.begin() );
			feats.row( static_cast<Eigen::Index>( i ) ) = allTokens[s][slot].row( p[1] * g + p[2] );
		}
		PcaResult pca = pca_top_components( feats, 3 );
		for( std::size_t k = 0; k < slices.size(); ++k ) {
			FeatureSlice fs;
			fs.sequence = cfg.sequences[s];
			fs.slice = slices[k];
			const Eigen::MatrixXd proj = ( allTokens[s][k].rowwise() - pca.mean ) * pca.components.transpose();
			for( int c = 0; c < 3; ++c ) {
				Eigen::MatrixXd grid( g, g );
				for( int r = 0; r < g; ++r ) {
					for( int cc = 0; cc < g; ++cc ) {
						grid( r, cc ) = proj( r * g + cc, c );
					}
				}
				fs.components[c] = upsample_patches( grid, P, rim, static_cast<std::size_t>( cfg.input_hw() ) );
			}
			out.maps.push_back( std::move( fs ) );
		}
		out.features.push_back( std::move( feats ) );
		out.pca.push_back( std::move( pca ) );
	}
	return out;
}

void write_feature_csv( const FeatureExport& features, const std::string& caseId, const std::string& path )
{
	std::ofstream out( path );
	if( !out ) {
		throw IoError( "cannot write '" + path + "'" );
	}
	out.precision( 9 );
	out << "case_id,sequence,slice,patch_row,patch_col";
	const Eigen::Index d = features.features.empty() ? 0 : features.features[0].cols();
	for( Eigen::Index j = 0; j < d; ++j ) {
		out << ",f" << j;
	}
	out << '\n';
	for( std::size_t s = 0; s < features.features.size(); ++s ) {
		for( std::size_t i = 0; i < features.patches.size(); ++i ) {
			const auto& p = features.patches[i];
			out << caseId << ',' << sequence_name( features.sequences[s] ) << ',' << p[0] << ',' << p[1] << ',' << p[2];
			for( Eigen::Index j = 0; j < d; ++j ) {
				out << ',' << features.features[s]( static_cast<Eigen::Index>( i ), j );
			}
			out << '\n';
		}
	}
}

} // namespace provit
