#pragma once

#include <Eigen/Dense>

#include <array>
#include <cstdint>
#include <functional>
#include <random>
#include <iosfwd>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace gqe {

using RowMatrixF = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using RowMatrixD = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using VectorD = Eigen::VectorXd;

using NodeId = std::uint32_t;

// Bad arguments or configuration supplied by the caller.
class UsageError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Malformed, inconsistent or numerically invalid data.
class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

using Digest = std::array<std::uint8_t, 32>;

// SHA-256 accumulator.
class Hasher {
 public:
  Hasher();
  ~Hasher();
  Hasher(const Hasher&) = delete;
  Hasher& operator=(const Hasher&) = delete;

  Hasher& update(const void* data, std::size_t size);
  Hasher& update(std::string_view text) { return update(text.data(), text.size()); }
  template <typename T>
  Hasher& update_pod(const T& value) {
    return update(&value, sizeof(T));
  }
  Digest finish();

 private:
  void* ctx_;
};

std::string to_hex(const Digest& digest);
Digest file_digest(const std::string& path);

// Worker count used by parallel_for; 0 means hardware concurrency.
void set_thread_count(unsigned threads);
unsigned thread_count();

// Runs body(i) for i in [0, n). Each index must write only its own output
// slot so that results are independent of the schedule.
void parallel_for(std::size_t n, const std::function<void(std::size_t)>& body);

// Little-endian binary helpers. The formats in this project are defined as
// little-endian; the host is asserted to be little-endian at compile time.
namespace binio {

void write_u32(std::ostream& out, std::uint32_t value);
void write_f32(std::ostream& out, float value);
void write_bytes(std::ostream& out, const void* data, std::size_t size);
std::uint32_t read_u32(std::istream& in, std::string_view what);
float read_f32(std::istream& in, std::string_view what);
void read_bytes(std::istream& in, void* data, std::size_t size, std::string_view what);
void expect_magic(std::istream& in, std::string_view magic, std::string_view what);

}  // namespace binio

// Uniform in (0, 1) from the top 53 bits of one draw.
double uniform01(std::mt19937_64& rng);
// Box-Muller deviate built on uniform01, so the sequence is fixed by the
// engine alone and not by the standard library's distribution code.
double standard_normal(std::mt19937_64& rng);

// Dot product accumulated in double in index order.
double dot(std::span<const float> a, std::span<const float> b);
double dot(std::span<const double> a, std::span<const float> b);

}  // namespace gqe
