"""
Shared configuration, logging and error types for mlx_handnerf.
"""
