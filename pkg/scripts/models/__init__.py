# Network definitions: LREN, SIRN, the latent diffusion model and their container.
