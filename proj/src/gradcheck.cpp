#include <fstream>
#include <functional>
#include <map>

#include <json.hpp>

#include "sarl/evaluate.hpp"

namespace sarl {

namespace {

using Inputs = std::map<std::string, Tensor<double>>;
using VarMap = std::map<std::string, ad::Var<double>>;
using Builder = std::function<ad::Var<double>(ad::Graph<double>&, VarMap&, const Inputs&)>;

// One audited term: differentiable leaves plus stop-gradient ("sg.") inputs
// that must influence the value but never the analytic gradient.
struct Term {
    std::string name;
    Inputs inputs;
    Builder build;
};

double eval_value(const Term& t, const Inputs& in) {
    ad::Graph<double> g;
    VarMap vars;
    for (const auto& [k, v] : in)
        vars[k] = k.rfind("sg.", 0) == 0 ? g.constant(v) : g.leaf(v);
    return t.build(g, vars, in).val()[0];
}

Tensor<double> rand_tensor(std::vector<int> shape, Rng& rng, double scale = 1.0) {
    Tensor<double> t(std::move(shape));
    for (auto& v : t.v) v = rng.normal() * scale;
    return t;
}

AffineWarp small_warp(int variant) {
    ViewParams p1, p2;
    p1.crop = {2 + variant, 3, 20, 24};
    p2.crop = {5, 1 + variant, 22, 18};
    p1.hflip = variant % 2 == 1;
    return warp_between(p1, p2);
}

}  // namespace

GradCheckReport gradcheck_suite(double h, double tolerance, uint64_t seed) {
    Rng rng(seed);
    std::vector<Term> terms;

    {  // global objective
        Term t;
        t.name = "global";
        t.inputs["pred1"] = rand_tensor({3, 5}, rng);
        t.inputs["pred2"] = rand_tensor({3, 5}, rng);
        t.inputs["sg.proj1"] = rand_tensor({3, 5}, rng);
        t.inputs["sg.proj2"] = rand_tensor({3, 5}, rng);
        t.build = [](ad::Graph<double>& g, VarMap& v, const Inputs& in) {
            return global_loss(v.at("pred1"), in.at("sg.proj2"), v.at("pred2"),
                               in.at("sg.proj1"));
        };
        terms.push_back(std::move(t));
    }
    {  // saliency alignment
        Term t;
        t.name = "sal";
        t.inputs["f"] = rand_tensor({8, 6, 6}, rng);
        t.inputs["sg.ftg"] = rand_tensor({8, 6, 6}, rng);
        t.build = [](ad::Graph<double>& g, VarMap& v, const Inputs& in) {
            Tensor<double> stg = saliency_plain(in.at("sg.ftg"));
            return sal_loss(saliency(v.at("f")), stg, small_warp(0), nullptr);
        };
        terms.push_back(std::move(t));
    }
    {  // part distribution w.r.t. features
        Term t;
        t.name = "ppda_features";
        t.inputs["f"] = rand_tensor({8, 6, 6}, rng);
        t.inputs["sg.ftg"] = rand_tensor({8, 6, 6}, rng);
        t.inputs["sg.bank"] = rand_tensor({5, 8}, rng);
        t.build = [](ad::Graph<double>& g, VarMap& v, const Inputs& in) {
            ad::Var<double> bank = g.constant(in.at("sg.bank"));
            return ppda_loss(v.at("f"), in.at("sg.ftg"), bank, 0.1, 3, 1e-8);
        };
        terms.push_back(std::move(t));
    }
    {  // part distribution w.r.t. the prototype bank
        Term t;
        t.name = "ppda_prototypes";
        t.inputs["bank"] = rand_tensor({5, 8}, rng);
        t.inputs["sg.bank_frozen"] = t.inputs["bank"];
        t.inputs["sg.f"] = rand_tensor({8, 6, 6}, rng);
        t.inputs["sg.ftg"] = rand_tensor({8, 6, 6}, rng);
        t.build = [](ad::Graph<double>& g, VarMap& v, const Inputs& in) {
            ad::Var<double> f = g.constant(in.at("sg.f"));
            return ppda_loss(f, in.at("sg.ftg"), v.at("bank"), 0.1, 3, 1e-8,
                             &in.at("sg.bank_frozen"));
        };
        terms.push_back(std::move(t));
    }
    {  // region affinity matching
        Term t;
        t.name = "ram";
        t.inputs["f"] = rand_tensor({8, 6, 6}, rng);
        t.inputs["sg.ftg"] = rand_tensor({8, 6, 6}, rng);
        t.build = [](ad::Graph<double>& g, VarMap& v, const Inputs& in) {
            return ram_loss(v.at("f"), in.at("sg.ftg"), small_warp(1), 4, nullptr);
        };
        terms.push_back(std::move(t));
    }
    {  // combined objective on a 2-sample batch
        Term t;
        t.name = "combined";
        for (int n = 1; n <= 2; ++n) {
            std::string v = std::to_string(n);
            t.inputs["f2_" + v] = rand_tensor({2, 8, 6, 6}, rng);
            t.inputs["f3_" + v] = rand_tensor({2, 8, 4, 4}, rng);
            t.inputs["f4_" + v] = rand_tensor({2, 8, 2, 2}, rng);
            t.inputs["pred_" + v] = rand_tensor({2, 5}, rng);
            t.inputs["sg.tf2_" + v] = rand_tensor({2, 8, 6, 6}, rng);
            t.inputs["sg.tf3_" + v] = rand_tensor({2, 8, 4, 4}, rng);
            t.inputs["sg.tf4_" + v] = rand_tensor({2, 8, 2, 2}, rng);
            t.inputs["sg.tproj_" + v] = rand_tensor({2, 5}, rng);
        }
        t.inputs["bank"] = rand_tensor({6, 8}, rng);
        t.inputs["sg.bank_frozen"] = t.inputs["bank"];
        t.build = [](ad::Graph<double>& g, VarMap& v, const Inputs& in) {
            PyramidVars<double> on1{v.at("f2_1"), v.at("f3_1"), v.at("f4_1"),
                                    g.constant(Tensor<double>({2, 8})), ad::Var<double>{},
                                    v.at("pred_1")};
            PyramidVars<double> on2{v.at("f2_2"), v.at("f3_2"), v.at("f4_2"),
                                    g.constant(Tensor<double>({2, 8})), ad::Var<double>{},
                                    v.at("pred_2")};
            static Pyramid<double> tg1, tg2;  // outlive the graph for this call
            tg1.f2 = in.at("sg.tf2_1");
            tg1.f3 = in.at("sg.tf3_1");
            tg1.f4 = in.at("sg.tf4_1");
            tg1.proj = in.at("sg.tproj_1");
            tg2.f2 = in.at("sg.tf2_2");
            tg2.f3 = in.at("sg.tf3_2");
            tg2.f4 = in.at("sg.tf4_2");
            tg2.proj = in.at("sg.tproj_2");
            static std::vector<AffineWarp> w12, w21;
            w12 = {small_warp(0), small_warp(2)};
            w21 = {invert(small_warp(0)), invert(small_warp(2))};
            CombinedLossInputs<double> ci;
            ci.online_v1 = &on1;
            ci.online_v2 = &on2;
            ci.target_v1 = &tg1;
            ci.target_v2 = &tg2;
            ci.warps_12 = &w12;
            ci.warps_21 = &w21;
            ci.bank = v.at("bank");
            ci.target_bank = &in.at("sg.bank_frozen");
            LossConfig lc;
            lc.num_prototypes = 6;
            lc.ppda_grid = 3;
            lc.ram_grid = 4;
            LossReport<double> rep;
            return combined_loss(ci, lc, rep);
        };
        terms.push_back(std::move(t));
    }

    GradCheckReport report;
    report.h = h;
    report.tolerance = tolerance;
    report.all_pass = true;

    for (const Term& t : terms) {
        // analytic gradients
        ad::Graph<double> g;
        VarMap vars;
        for (const auto& [k, v] : t.inputs)
            vars[k] = k.rfind("sg.", 0) == 0 ? g.constant(v) : g.leaf(v);
        ad::Var<double> loss = t.build(g, vars, t.inputs);
        g.backward(loss);

        double max_rel = 0;
        bool stopgrad_ok = true;
        for (const auto& [k, base] : t.inputs) {
            bool sg = k.rfind("sg.", 0) == 0;
            double max_abs_fd = 0;
            for (int64_t i = 0; i < base.size(); ++i) {
                Inputs in = t.inputs;
                in.at(k)[i] = base[i] + h;
                double up = eval_value(t, in);
                in.at(k)[i] = base[i] - h;
                double dn = eval_value(t, in);
                double fd = (up - dn) / (2 * h);
                if (sg) {
                    max_abs_fd = std::max(max_abs_fd, std::abs(fd));
                    continue;
                }
                double a = g.grad(vars.at(k))[i];
                double scale = std::max({std::abs(a), std::abs(fd), 1e-4});
                max_rel = std::max(max_rel, std::abs(a - fd) / scale);
            }
            // Stop-gradient inputs must move the value but carry no analytic
            // gradient path (they were bound as graph constants).
            if (sg && max_abs_fd == 0) stopgrad_ok = false;
        }
        GradCheckEntry e;
        e.term = t.name;
        e.max_rel_err = max_rel;
        e.pass = max_rel < tolerance && stopgrad_ok;
        report.all_pass = report.all_pass && e.pass;
        report.entries.push_back(std::move(e));
    }
    return report;
}

void write_gradcheck_json(const GradCheckReport& r, const std::string& path) {
    nlohmann::json terms = nlohmann::json::object();
    for (const auto& e : r.entries)
        terms[e.term] = {{"max_rel_err", e.max_rel_err}, {"pass", e.pass}};
    nlohmann::json j{
        {"h", r.h}, {"tolerance", r.tolerance}, {"all_pass", r.all_pass}, {"terms", terms}};
    std::ofstream(path) << j.dump(2) << "\n";
}

}  // namespace sarl
