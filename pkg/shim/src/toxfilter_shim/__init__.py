"""Reference HTTP service for the toxfilter classifier wire protocol.

Serves /v1/classify/image, /v1/classify/text, /v1/judge, and /v1/health.
Mock mode answers every request as a pure function of its body (no
models, no network) and is what integration tests run against; real
mode wraps operator-configured safety/toxicity/judge models behind the
same schemas.
"""

from .app import ShimConfig, create_app

__version__ = "0.1.0"
