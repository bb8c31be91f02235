// Compares the OpenMP kernels against their serial reference
// implementations: correctness deltas and wall-time ratios per kernel.

#include <chrono>
#include <cstdio>

#include "itx/kernels.hpp"
#include "itx/threads.hpp"

using namespace itx;

namespace {

template <typename F>
double time_best_of(int reps, F fn) {
  double best = 1e300;
  for (int r = 0; r < reps; ++r) {
    const auto t0 = std::chrono::steady_clock::now();
    fn();
    const auto t1 = std::chrono::steady_clock::now();
    best = std::min(best, std::chrono::duration<double>(t1 - t0).count());
  }
  return best;
}

double max_diff(const Tensor5D& a, const Tensor5D& b) {
  double m = 0.0;
  for (int64_t i = 0; i < a.size(); ++i)
    m = std::max(m, std::abs(static_cast<double>(a[i]) -
                             static_cast<double>(b[i])));
  return m;
}

}  // namespace

int main() {
  init_threads_from_env();
  printf("threads: %d\n", max_threads());
  printf("%-28s %10s %10s %8s %10s\n", "kernel", "parallel_s", "serial_s",
         "speedup", "max_diff");

  const Dims5 d{2, 16, 4, 64, 64};
  Tensor5D x = random_uniform<float>(d, -1.0f, 1.0f, 1);
  Tensor5D w = random_uniform<float>({16, 16, 1, 3, 3}, -1.0f, 1.0f, 2);
  Tensor5D b = random_uniform<float>({1, 16, 1, 1, 1}, -1.0f, 1.0f, 3);

  {
    Tensor5D yp = conv2d(x, w, b);
    Tensor5D ys = ref::conv2d(x, w, b);
    const double tp = time_best_of(3, [&] { conv2d(x, w, b); });
    const double ts = time_best_of(3, [&] { ref::conv2d(x, w, b); });
    printf("%-28s %10.4f %10.4f %7.1fx %10.2e\n", "conv2d 16ch 64x64", tp, ts,
           ts / tp, max_diff(yp, ys));
  }
  {
    Tensor5D gain(Dims5{1, 16, 1, 1, 1}, 1.0f);
    Tensor5D off(Dims5{1, 16, 1, 1, 1});
    Tensor5D yp = layer_norm(x, gain, off, 1e-5f);
    Tensor5D ys = ref::layer_norm(x, gain, off, 1e-5f);
    const double tp = time_best_of(5, [&] { layer_norm(x, gain, off, 1e-5f); });
    const double ts =
        time_best_of(5, [&] { ref::layer_norm(x, gain, off, 1e-5f); });
    printf("%-28s %10.4f %10.4f %7.1fx %10.2e\n", "layer_norm", tp, ts, ts / tp,
           max_diff(yp, ys));
  }
  {
    // window attention core on assembled stacks
    WindowSpec ws{8, 2};
    DataMatrixSet qs = assemble_local(x, ws);
    DataMatrixSet ks = assemble_local(x, ws);
    DataMatrixSet vs = assemble_local(x, ws);
    const float scale = std::sqrt(64.0f);
    Tensor5D outp, a;
    const double tp = time_best_of(5, [&] {
      Tensor5D logits(Dims5{qs.count, 1, 1, qs.rows, qs.rows});
      stack_gemm(qs.count, qs.rows, qs.rows, qs.cols, 1.0f / scale,
                 qs.stack.data(), Trans::No, ks.stack.data(), Trans::Yes, 0.0f,
                 logits.data());
      a = softmax_rows(logits);
      outp = Tensor5D(qs.stack.dims());
      stack_gemm(qs.count, qs.rows, qs.cols, qs.rows, 1.0f, a.data(), Trans::No,
                 vs.stack.data(), Trans::No, 0.0f, outp.data());
    });
    Tensor5D outs(qs.stack.dims());
    const double ts = time_best_of(5, [&] {
      for (int64_t m = 0; m < qs.count; ++m)
        ref::scaled_attention_matrix(qs.matrix(m), ks.matrix(m), vs.matrix(m),
                                     qs.rows, qs.cols,
                                     static_cast<const float*>(nullptr),
                                     static_cast<double>(scale),
                                     outs.data() + m * qs.rows * qs.cols);
    });
    printf("%-28s %10.4f %10.4f %7.1fx %10.2e\n", "window attention core", tp,
           ts, ts / tp, max_diff(outp, outs));
  }
  return 0;
}
