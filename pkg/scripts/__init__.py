# agworkforce
"""
Downscaling agricultural workforce shares (EPWA) to a global grid.

- raster.py / grid_io.py: grids, resampling, zonal statistics, raster files
- ingest.py: label corpus and per-unit covariates
- basis.py / gamm.py: smooth bases and the Beta GAMM
- model_store.py: fitted model artifact
- validate.py: spatial, temporal and multiscale validation
- deploy.py: SSP deployment and correction
- cli.py: `agwork` command line
"""
