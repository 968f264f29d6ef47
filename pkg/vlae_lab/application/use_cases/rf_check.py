import numpy as np

from vlae_lab.application.config import load_config
from vlae_lab.application.dto import RfCheckInput, RfCheckOutput
from vlae_lab.domain.masks import assert_causality
from vlae_lab.domain.networks import build_decoder


class RfCheckUseCase:
    """Build the configured decoder with random weights and check its Jacobian support."""

    def execute(self, input: RfCheckInput) -> RfCheckOutput:
        config = load_config(input.config, dict(input.overrides))
        shape = (input.channels, input.grid_height, input.grid_width)
        rng = np.random.default_rng(input.seed)
        decoder = build_decoder(rng, shape, config.model.latent_dim, config.model.decoder_spec())
        decoder.randomize(rng)
        report = assert_causality(decoder, shape, rng=rng)
        field = decoder.receptive_field
        return RfCheckOutput(
            window=field.name,
            height=field.height,
            width=field.width,
            left_extent=field.left_extent,
            report=report,
        )
