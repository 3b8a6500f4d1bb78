from torch.nn import Module

PLUG_IN = 0
POSTERIOR_DRAW = 1


class SamplingModeModule(Module):
    """
    Modules that sample graphs from Beta posteriors over edge probabilities.

    - PLUG_IN (default) - every edge is drawn with the posterior mean
        probability of its node. The sampled distribution is a fixed
        product-Bernoulli model.
    - POSTERIOR_DRAW - node probabilities are drawn from their Beta posteriors
        once per sampled window, then edges are drawn with those probabilities.
    """

    _mode = PLUG_IN

    @property
    def mode(self):
        return self._mode

    @mode.setter
    def mode(self, value):
        assert value in [PLUG_IN, POSTERIOR_DRAW]
        self._mode = value

        for ele in self.children():
            if isinstance(ele, SamplingModeModule):
                ele.mode = value

    def plug_in(self):
        self.mode = PLUG_IN

    def posterior_draw(self):
        self.mode = POSTERIOR_DRAW
