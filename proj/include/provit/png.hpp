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
#include <cstdint>
#include <string>

#include "provit/volume.hpp"

namespace provit {

// Jet colormap: t in [0, 1] maps dark blue -> cyan -> yellow -> dark red; out-of-range values clamp.
std::array<std::uint8_t, 3> jet( double t );

void write_png_rgb( const std::string& path, std::size_t width, std::size_t height, const std::uint8_t* rgb );
// Values are scaled by (v - lo) / (hi - lo) before colouring.
void write_heatmap_png( const std::string& path, const Plane<float>& plane, double lo = 0.0, double hi = 1.0 );

} // namespace provit
