"""
Mistake-notebook memory evolution engine.

A frozen model is improved through a structured memory of guidance distilled
from its batch failures; a memory update is committed only when it improves
the batch.
"""
__version__ = "1.0.0"
