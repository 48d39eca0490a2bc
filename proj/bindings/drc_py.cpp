#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include "drc/checkpoint.hpp"
#include "drc/config.hpp"
#include "drc/eval_metrics.hpp"

namespace py = pybind11;
using namespace drc;

namespace {

using Arr = py::array_t<double, py::array::c_style | py::array::forcecast>;

Tensor tensor_from(const Arr& a) {
    std::vector<i64> shape(a.ndim());
    for (py::ssize_t i = 0; i < a.ndim(); ++i) shape[static_cast<size_t>(i)] = a.shape(i);
    std::vector<double> data(a.data(), a.data() + a.size());
    return Tensor::from_data(shape, std::move(data));
}

py::array_t<double> array_from(const Tensor& t) {
    std::vector<py::ssize_t> shape(t.shape().begin(), t.shape().end());
    py::array_t<double> out(shape);
    std::copy(t.data(), t.data() + t.numel(), out.mutable_data());
    return out;
}

BinaryMask mask_from(const Arr& a) {
    BinaryMask m(static_cast<size_t>(a.size()));
    for (py::ssize_t i = 0; i < a.size(); ++i) m[static_cast<size_t>(i)] = a.data()[i] > 0.5;
    return m;
}

Tensor as4d(const Arr& a) {
    Tensor t = tensor_from(a);
    if (t.shape().size() == 3) return reshape(t, {1, t.dim(0), t.dim(1), t.dim(2)});
    if (t.shape().size() == 2) return reshape(t, {1, 1, t.dim(0), t.dim(1)});
    return t;
}

// Checkpointed model with posterior-sampling inference.
class PyModel {
public:
    explicit PyModel(const std::string& ckpt_path)
        : trainer_(Trainer::load_checkpoint(ckpt_path)),
          cfg_(RunConfig::from_json_text(trainer_.config_json())) {}

    py::dict infer(const Arr& image, i64 steps, u64 seed) {
        Tensor x = as4d(image);
        Rng rng(seed ^ 0x1f3aULL);
        ChainStore chains(1, cfg_.arch.z_fg, cfg_.arch.z_bg, cfg_.arch.z_pix, false, rng);
        ChainRunConfig run;
        run.recon = cfg_.recon;
        run.tv_weight = cfg_.train.tv_weight_effective();
        run.disable_reassignment = cfg_.train.disable_reassignment;
        run.steps_override = steps >= 0 ? steps : cfg_.langevin.test_steps;
        LatentTriple z = run_chain(trainer_.model(), chains, ChainTarget::posterior, {0},
                                   &x, cfg_.langevin, run, rng);
        MixtureOutput mix = mixture_forward(trainer_.model(), z.fg, z.bg, z.pix, nullptr,
                                            cfg_.recon, run.disable_reassignment);
        py::dict out;
        out["pi_f"] = array_from(mix.pi_f);
        out["composed"] = array_from(mix.composed);
        out["fg_rgb"] = array_from(mix.fg_rgb);
        out["bg_rgb_reassigned"] = array_from(mix.bg_rgb_re);
        out["grid"] = array_from(mix.grid);
        return out;
    }

    std::string config_json() const { return trainer_.config_json(); }

private:
    Trainer trainer_;
    RunConfig cfg_;
};

}  // namespace

PYBIND11_MODULE(_drc, m) {
    m.doc() = "Deep region competition: two-expert unsupervised foreground extraction";

    m.def("iou", [](const Arr& a, const Arr& b) { return iou(mask_from(a), mask_from(b)); });
    m.def("dice",
          [](const Arr& a, const Arr& b) { return dice(mask_from(a), mask_from(b)); });
    m.def("best_permutation_score",
          [](const Arr& pa, const Arr& pb, const Arr& gt, bool use_dice) {
              return best_permutation_score(mask_from(pa), mask_from(pb), mask_from(gt),
                                            use_dice);
          },
          py::arg("pred_a"), py::arg("pred_b"), py::arg("gt"), py::arg("use_dice") = false);

    m.def("tv_norm", [](const Arr& img) { return tv_norm(as4d(img)).data()[0]; });
    m.def("orthogonal_reg", [](const Arr& w) { return orthogonal_reg(tensor_from(w)).item(); });
    m.def("identity_grid",
          [](i64 h, i64 w) { return array_from(reshape(identity_grid(1, h, w), {2, h, w})); });
    m.def("grid_sample", [](const Arr& image, const Arr& grid) {
        Tensor img = as4d(image);
        Tensor g = as4d(grid);
        Tensor out = grid_sample(img, g);
        return array_from(reshape(out, {img.dim(1), img.dim(2), img.dim(3)}));
    });
    m.def("gating", [](const Arr& fg_logit, const Arr& bg_logit) {
        auto [pf, pb] = gating(as4d(fg_logit), as4d(bg_logit));
        return py::make_tuple(array_from(pf), array_from(pb));
    });
    m.def("responsibilities",
          [](const Arr& pf, const Arr& pb, const Arr& lf, const Arr& lb, double eps) {
              return array_from(
                  responsibilities(as4d(pf), as4d(pb), as4d(lf), as4d(lb), eps));
          },
          py::arg("pi_f"), py::arg("pi_b"), py::arg("loglik_f"), py::arg("loglik_b"),
          py::arg("epsilon") = 1e-8);
    m.def("region_loglik",
          [](const Arr& region, const Arr& x, double sigma, const std::string& norm) {
              ReconConfig cfg;
              cfg.sigma = sigma;
              cfg.norm = norm == "squared_l2" ? ReconConfig::Norm::squared_l2
                                              : ReconConfig::Norm::l1;
              return array_from(region_loglik(as4d(region), as4d(x), cfg));
          },
          py::arg("region"), py::arg("x"), py::arg("sigma") = 0.3, py::arg("norm") = "l1");
    m.def("pseudo_label_loss", [](const std::vector<double>& p, const std::vector<double>& q) {
        return pseudo_label_loss(p, q);
    });
    m.def("langevin_step",
          [](const Arr& z, const Arr& grad, double delta, py::object noise) {
              Tensor zt = tensor_from(z);
              Tensor gt = tensor_from(grad);
              const double s = 0.5 * delta * delta;
              if (noise.is_none()) return array_from(langevin_step(zt, gt, s, nullptr));
              Tensor nt = tensor_from(noise.cast<Arr>());
              return array_from(langevin_step(zt, gt, s, &nt));
          },
          py::arg("z"), py::arg("grad_logq"), py::arg("delta"), py::arg("noise") = py::none());

    m.def("sample_scene",
          [](i64 resolution, u64 seed, i64 sprite_min, i64 sprite_max) {
              DataConfig cfg;
              cfg.resolution = resolution;
              cfg.sprite_min = sprite_min;
              cfg.sprite_max = sprite_max;
              TextureBank bank(cfg.n_textures, resolution, cfg.texture_bank_seed);
              SceneSample s = sample_scene(cfg, bank, seed);
              py::array_t<double> mask({resolution, resolution});
              for (i64 i = 0; i < resolution * resolution; ++i)
                  mask.mutable_data()[i] = s.mask[static_cast<size_t>(i)];
              return py::make_tuple(array_from(s.image), mask);
          },
          py::arg("resolution") = 64, py::arg("seed") = 0, py::arg("sprite_min") = 2,
          py::arg("sprite_max") = 3);

    py::class_<PyModel>(m, "Model")
        .def(py::init<const std::string&>(), py::arg("checkpoint"))
        .def("infer", &PyModel::infer, py::arg("image"), py::arg("steps") = -1,
             py::arg("seed") = 0)
        .def("config_json", &PyModel::config_json);
}
