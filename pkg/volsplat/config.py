from pydantic_settings import BaseSettings


class Settings(BaseSettings):
    app_name: str = "volsplat"
    debug: bool = False

    # Gaussian core
    near_plane: float = 0.01
    condition_cap: float = 1e12
    filter_variance: float = 0.3  # px²

    # Splatting
    tile_size: int = 16
    alpha_clamp_max: float = 0.99
    termination_transmittance: float = 1e-4
    satn_termination_transmittance: float = 1e-7
    footprint_cutoff: float = 3.33
    render_precision: str = "float64"  # or "float32"

    # Ray marching
    bins_per_batch: int = 128
    bins_per_gaussian: int = 16
    section_extent_sigmas: float = 3.0
    section_buffer_capacity: int = 64
    termination_opacity: float = 1e-4
    line_mass_cull: float = 1e-12

    # Metrics
    psnr_cap: float = 99.0
    ssim_window: int = 11
    ssim_sigma: float = 1.5
    ssim_k1: float = 0.01
    ssim_k2: float = 0.03

    # Gradient check
    gradcheck_perturbation: float = 1e-5
    gradcheck_tolerance: float = 1e-4
    gradcheck_march_tolerance: float = 5e-4
    gradcheck_floor: float = 1e-6

    # Workers
    threads: int = 1

    model_config = {
        "env_file": ".env",
        "env_file_encoding": "utf-8",
        "env_prefix": "VOLSPLAT_",
        "extra": "ignore",
    }


settings = Settings()
