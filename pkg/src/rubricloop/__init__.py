"""rubricloop: confusion-aware rubric optimization for LLM graders."""

__version__ = "0.1.0"
