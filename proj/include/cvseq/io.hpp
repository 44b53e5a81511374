#pragma once

#include <string>
#include <utility>
#include <vector>

#include "cvseq/nn.hpp"

namespace cvseq {

// Container format shared by checkpoints and feature-grid files: a UTF-8 JSON
// header {name -> {shape, byte_offset}}, one newline, then the raw
// little-endian float32 payload with entries in header order.
void save_tensors(const std::string& path, const ParamList& tensors);
std::vector<std::pair<std::string, Tensor>> load_tensors(const std::string& path);

// Copies file values into the named model parameters (widened to 64 bit).
// Shape mismatches and names missing from the file are errors; with
// allow_missing the latter are skipped (two-phase training restores a
// baseline checkpoint into a larger model). File entries with no matching
// parameter are always an error.
void load_checkpoint(const std::string& path, ParamList& params, bool allow_missing = false);
inline void save_checkpoint(const std::string& path, const ParamList& params) {
    save_tensors(path, params);
}

// 8-bit RGB PNG <-> [3 x H x W] tensor with values in [0, 1]
Tensor read_png_rgb(const std::string& path);
void write_png_rgb(const std::string& path, const Tensor& img);

}  // namespace cvseq
