# HTTP routers: tracks, experiments
