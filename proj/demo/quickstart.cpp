// Simulate a small covariate Hawkes corpus, train briefly, print metrics and
// the learned feature ranking next to the ground truth.

#include <iostream>

#include "covtpp/covtpp.hpp"

int main() {
  using namespace covtpp;
  SimConfig sim = SimConfig::hawkes_default();
  Dataset d = standardize_covariates(generate_dataset(sim, 200, 1));

  HyperParams hp;
  hp.embed_dim = hp.key_dim = hp.aux_dim = hp.ffn_dim = 16;
  hp.value_dim = 8;
  hp.mixture_components = 4;
  TrainConfig tc;
  tc.max_epochs = 15;
  tc.seed = 1;
  TrainResult r = train(d, hp, tc);

  const Metrics m = evaluate(r.model, d, Split::test);
  std::cout << "test accuracy " << m.accuracy << " (majority " << majority_baseline(d, Split::test) << ")\n"
            << "test time log-likelihood per event " << m.time_ll_per_event << "\n";

  const auto fi = corpus_importance(d, Split::test, r.model.params(), r.model.hyperparams());
  std::cout << "feature  learned  truth\n";
  for (auto f : importance_ranking(fi)) std::cout << f << "  " << fi[f] << "  " << d.ground_truth_importance[f] << "\n";
}
