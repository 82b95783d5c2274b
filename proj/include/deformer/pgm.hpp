#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace deformer {

// Binary PGM (P5, maxval 255). Values are raw grayscale bytes in row-major
// order; binary images should be passed as 0/255.
void write_pgm(const std::string& path, int rows, int cols, const std::vector<std::uint8_t>& pixels);

// Reads a P5 file written by write_pgm (test support).
std::vector<std::uint8_t> read_pgm(const std::string& path, int& rows, int& cols);

}  // namespace deformer
