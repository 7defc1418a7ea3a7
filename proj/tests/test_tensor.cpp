#include <doctest.h>

#include <cstring>
#include <fstream>

#include "helpers.hpp"
#include "mixshare/checkpoint.hpp"
#include "mixshare/ops.hpp"
#include "mixshare/rng.hpp"
#include "mixshare/tensor.hpp"

using namespace mixshare;

TEST_CASE("tensor construction and shape errors") {
  Tensor t({2, 3}, 1.5);
  CHECK(t.numel() == 6);
  CHECK(t.rank() == 2);
  CHECK(t.dim(1) == 3);
  CHECK(t[4] == 1.5);
  CHECK_THROWS_AS(Tensor({2, 2}, std::vector<double>{1, 2, 3}), ShapeError);
  CHECK_THROWS_AS(t.dim(2), ShapeError);
  CHECK(Tensor::scalar(4.0).item() == 4.0);
  CHECK_THROWS(t.item());
}

TEST_CASE("copies share storage, clone does not") {
  Tensor a({3}, 0.0);
  Tensor b = a;
  b.data()[0] = 7.0;
  CHECK(a[0] == 7.0);
  Tensor c = a.clone();
  c.data()[1] = 2.0;
  CHECK(a[1] == 0.0);
  CHECK(a.same_storage(b));
  CHECK_FALSE(a.same_storage(c));
}

TEST_CASE("backward of sum(x*x) gives 2x") {
  Tensor x({4}, std::vector<double>{1.0, -2.0, 0.5, 3.0});
  x.set_requires_grad(true);
  Tape tape;
  Tensor loss;
  {
    TapeScope scope(tape);
    loss = sum(mul(x, x));
  }
  backward(loss);
  const auto g = x.grad();
  CHECK(g == std::vector<double>{2.0, -4.0, 1.0, 6.0});
}

TEST_CASE("gradient accumulates across uses of one tensor") {
  Tensor x({2}, std::vector<double>{1.0, 2.0});
  x.set_requires_grad(true);
  Tape tape;
  TapeScope scope(tape);
  Tensor loss = sum(add(scale(x, 3.0), x));
  backward(loss);
  CHECK(x.grad() == std::vector<double>{4.0, 4.0});
}

TEST_CASE("ops are not recorded without a tape or without grad inputs") {
  Tensor x({3}, 1.0);
  Tape tape;
  TapeScope scope(tape);
  Tensor y = relu(x);
  CHECK(tape.size() == 0);
  CHECK_FALSE(y.requires_grad());
  x.set_requires_grad(true);
  Tensor z = relu(x);
  CHECK(tape.size() == 1);
  CHECK(z.requires_grad());
}

TEST_CASE("backward misuse is reported") {
  Tensor x({2}, 1.0);
  CHECK_THROWS_AS(backward(sum(x)), std::logic_error);  // untracked loss

  x.set_requires_grad(true);
  Tape tape;
  TapeScope scope(tape);
  Tensor loss = sum(x);
  backward(loss);
  CHECK(tape.consumed());
  CHECK_THROWS_AS(backward(loss), std::logic_error);
  tape.clear();
  CHECK_FALSE(tape.consumed());
  CHECK(tape.size() == 0);

  Tensor v = relu(x);
  CHECK_THROWS_AS(backward(v), ShapeError);  // not a scalar
}

TEST_CASE("zero_grad clears accumulated gradients") {
  Tensor x({2}, 1.0);
  x.set_requires_grad(true);
  Tape tape;
  TapeScope scope(tape);
  backward(sum(x));
  CHECK(x.has_grad());
  x.zero_grad();
  CHECK(x.grad() == std::vector<double>{0.0, 0.0});
}

TEST_CASE("checkpoint byte layout matches hand-built image") {
  NamedTensors tensors;
  tensors.emplace_back("a", Tensor({2}, std::vector<double>{1.0, -2.0}));
  const std::string bytes = encode_checkpoint(tensors);

  std::string expected = "MXSH";
  auto put = [&](auto value) {
    char buf[sizeof(value)];
    std::memcpy(buf, &value, sizeof(value));  // host is little-endian
    expected.append(buf, sizeof(value));
  };
  put(std::uint32_t{1});
  put(std::uint64_t{1});
  put(std::uint32_t{1});
  expected += "a";
  put(std::uint32_t{1});
  put(std::uint64_t{2});
  put(1.0);
  put(-2.0);
  CHECK(bytes == expected);
}

TEST_CASE("checkpoint round trip and corruption") {
  NamedTensors tensors;
  tensors.emplace_back("w", testutil::random_tensor({3, 2, 2}, 5));
  tensors.emplace_back("s", Tensor::scalar(3.25));
  const auto dir = testutil::scratch_dir("ckpt");
  write_checkpoint(dir / "c.mxsh", tensors);
  const auto back = read_checkpoint(dir / "c.mxsh");
  REQUIRE(back.size() == 2);
  CHECK(back[0].first == "w");
  CHECK(back[0].second.shape() == Shape{3, 2, 2});
  CHECK(testutil::bit_equal(back[0].second.data(), tensors[0].second.data()));
  CHECK(back[1].second.item() == 3.25);

  const std::string bytes = encode_checkpoint(tensors);
  CHECK_THROWS(decode_checkpoint(bytes.substr(0, bytes.size() - 3)));
  CHECK_THROWS(decode_checkpoint("XXXX" + bytes.substr(4)));
  CHECK_THROWS(read_checkpoint(dir / "missing.mxsh"));
}

TEST_CASE("rng draws are reproducible and in range") {
  Rng a(42), b(42);
  for (int i = 0; i < 100; ++i) CHECK(a.next_u64() == b.next_u64());

  Rng r(1);
  double sum = 0.0;
  for (int i = 0; i < 20000; ++i) {
    const double u = r.uniform();
    REQUIRE(u >= 0.0);
    REQUIRE(u < 1.0);
    sum += u;
  }
  CHECK(sum / 20000 == doctest::Approx(0.5).epsilon(0.02));

  std::vector<int> counts(7, 0);
  for (int i = 0; i < 70000; ++i) ++counts[r.below(7)];
  for (int c : counts) CHECK(std::abs(c - 10000) < 450);

  double bsum = 0.0, bsq = 0.0;
  for (int i = 0; i < 20000; ++i) {
    const double x = r.beta(2.0, 2.0);
    REQUIRE(x > 0.0);
    REQUIRE(x < 1.0);
    bsum += x;
    bsq += x * x;
  }
  const double mean = bsum / 20000;
  CHECK(mean == doctest::Approx(0.5).epsilon(0.01));
  CHECK(bsq / 20000 - mean * mean == doctest::Approx(0.05).epsilon(0.05));  // 1/(4(2a+1))
}

TEST_CASE("rng shuffle is a permutation and fork gives distinct streams") {
  Rng r(3);
  std::vector<int> v(50);
  for (int i = 0; i < 50; ++i) v[i] = i;
  r.shuffle(std::span<int>(v));
  auto sorted = v;
  std::sort(sorted.begin(), sorted.end());
  for (int i = 0; i < 50; ++i) CHECK(sorted[i] == i);

  Rng f1 = r.fork(1), f2 = r.fork(2), f1b = Rng(3).fork(1);
  const auto x1 = f1.next_u64();
  CHECK(x1 != f2.next_u64());
  CHECK(x1 == f1b.next_u64());
}
