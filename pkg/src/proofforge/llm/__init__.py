"""Model access: prompt templates, response parsing and backends."""

from .cassette import Cassette, CassetteEntry, CassetteMissError
from .gateway import LiveChatBackend, LlmGateway, ProviderError, ScriptedLlm, ScriptExhaustedError
from .responses import (
    CodeBlock,
    EmptyResponseError,
    UnparseableVerdictError,
    extract_code_block,
    extract_code_blocks,
    parse_verdict,
)
from .templates import TEMPLATES, PromptTemplate, RenderError, RenderedPrompt, render_prompt

__all__ = [
    "Cassette",
    "CassetteEntry",
    "CassetteMissError",
    "CodeBlock",
    "EmptyResponseError",
    "LiveChatBackend",
    "LlmGateway",
    "PromptTemplate",
    "ProviderError",
    "RenderError",
    "RenderedPrompt",
    "ScriptExhaustedError",
    "ScriptedLlm",
    "TEMPLATES",
    "UnparseableVerdictError",
    "extract_code_block",
    "extract_code_blocks",
    "parse_verdict",
    "render_prompt",
]
