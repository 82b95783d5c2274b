#include "deformer/pgm.hpp"

#include <fstream>

#include "deformer/errors.hpp"

namespace deformer {

void write_pgm(const std::string& path, int rows, int cols, const std::vector<std::uint8_t>& pixels) {
  if (rows < 1 || cols < 1 || pixels.size() != static_cast<std::size_t>(rows) * cols) {
    throw DataError("pgm: pixel count " + std::to_string(pixels.size()) + " does not match " +
                    std::to_string(rows) + "x" + std::to_string(cols));
  }
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("pgm: cannot write '" + path + "'");
  out << "P5\n" << cols << " " << rows << "\n255\n";
  out.write(reinterpret_cast<const char*>(pixels.data()), static_cast<std::streamsize>(pixels.size()));
}

std::vector<std::uint8_t> read_pgm(const std::string& path, int& rows, int& cols) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("pgm: cannot open '" + path + "'");
  std::string magic;
  int maxval = 0;
  in >> magic >> cols >> rows >> maxval;
  if (magic != "P5" || maxval != 255 || rows < 1 || cols < 1) {
    throw DataError("pgm: '" + path + "' is not a maxval-255 P5 file");
  }
  in.get();  // single whitespace after the header
  std::vector<std::uint8_t> pixels(static_cast<std::size_t>(rows) * cols);
  in.read(reinterpret_cast<char*>(pixels.data()), static_cast<std::streamsize>(pixels.size()));
  if (!in) throw DataError("pgm: truncated pixel data in '" + path + "'");
  return pixels;
}

}  // namespace deformer
