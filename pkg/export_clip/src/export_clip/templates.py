"""Prompt templates for text-side prototype extraction."""

from __future__ import annotations

DEFAULT_TEMPLATES = (
    "a photo of a {}",
    "itap of a {}",
    "a bad photo of the {}",
    "a origami {}",
    "a photo of the large {}",
    "a {} in a video game",
    "art of the {}",
    "a photo of the small {}",
)


class InvalidTemplate(ValueError):
    """Raised for templates that cannot take a class name."""


def check_templates(templates) -> tuple[str, ...]:
    """Validate a template collection and return it as a tuple."""
    templates = tuple(templates)
    if not templates:
        raise InvalidTemplate("need at least one template")
    for t in templates:
        if not isinstance(t, str):
            raise InvalidTemplate(f"template {t!r} is not a string")
        if t.count("{}") != 1:
            raise InvalidTemplate(f"template {t!r} must contain exactly one {{}} slot")
    return templates


def expand(template: str, class_name: str) -> str:
    """Fill a template's slot with a class name."""
    check_templates((template,))
    return template.format(class_name)


def prompts_for(template: str, class_names) -> list[str]:
    """Expand one template across all class names, preserving order."""
    return [expand(template, name) for name in class_names]
