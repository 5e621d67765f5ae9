"""Question-answering prompt assembly from region captions (no model is called)."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

VQA_PREAMBLE = (
    "You are a helpful assistant answering questions about images to people. You can look "
    "at the list of  object detections in the image and answer questions. The image content "
    "may not be sufficient to answer the questions, and you may need to rely on external "
    "knowledge resources or commonsense. In an image, many objects were detected. They are "
    "listed in the following format:  [object descriptions] [cx, cy, w, h], where cx is x "
    "coordinate of the center, cy is the y coordinate of the center, w is the width and h is "
    "the height of the bounding box of that object in the image."
)

VIZWIZ_PREAMBLE = (
    "You are a helpful assistant answering questions about images to people. You can look "
    "at the list of  object detections in the image and answer questions. The image content "
    "may not be sufficient to answer the questions, and you may need to rely on external "
    "knowledge resources or commonsense. In an image, many objects were detected. They are "
    "listed in the following format:  [object descriptions] [cx, cy, w, h] [score], where "
    "cx is x coordinate of the center, cy is the y coordinate of the center, w is the width,  "
    "h is the height and score is the confidence score for the object detection. Low score "
    "means the detection is likely inaccurate, and this often makes the question "
    "unanswerable. You can answer questions as 'unanswerable'."
)

VIDEO_PREAMBLE = (
    "You are a helpful assistant answering questions about videos to people. You can look "
    "at the list of  object detections in each frame and answer questions."
)

OBJECTS_HEADER = "The list of objects is as follows: "
VIDEO_HEADER = "In a video, many objects were detected in each frame."
VARIANTS = ("standard", "vizwiz")
MAX_FRAMES = 8


@dataclass(frozen=True)
class ObjectLine:
    captions: tuple[str, ...]
    box: tuple[int, int, int, int]  # pixel cx, cy, w, h
    score: float | None = None


def format_object_line(line: ObjectLine, variant: str = "standard") -> str:
    if variant not in VARIANTS:
        raise ValueError(f"unknown prompt variant {variant!r}")
    if not line.captions:
        raise ValueError("object line needs at least one caption")
    cx, cy, w, h = (int(v) for v in line.box)
    text = f"{', '.join(line.captions)} [{cx}, {cy}, {w}, {h}]"
    if variant == "vizwiz":
        if line.score is None:
            raise ValueError("vizwiz object lines need a score")
        text += f" [{line.score}]"
    return text + ","


def question_prompt(question: str) -> str:
    return f"Q: {question} Answer in one word. A:"


def build_vqa_prompt(width: int, height: int, image_captions: Sequence[str],
                     objects: Sequence[ObjectLine], question: str,
                     variant: str = "standard") -> str:
    if variant not in VARIANTS:
        raise ValueError(f"unknown prompt variant {variant!r}")
    for line in objects:
        cx, cy, w, h = line.box
        if not (0 <= cx <= width and 0 <= cy <= height and 0 <= w <= width and 0 <= h <= height):
            raise ValueError(f"box {line.box} lies outside a {width}x{height} image")
    preamble = VIZWIZ_PREAMBLE if variant == "vizwiz" else VQA_PREAMBLE
    sections = [
        preamble,
        f"The height of the image is {height} and width of the image is {width}",
        f"Full images descriptions for this image are: {', '.join(image_captions)}",
        OBJECTS_HEADER + "".join(format_object_line(o, variant) for o in objects),
        question_prompt(question),
    ]
    return " ".join(sections)


def build_video_prompt(frames: Sequence[tuple[int, Sequence[str]]], question: str) -> str:
    """``frames`` holds ``(frame index, captions)`` pairs, at most eight."""
    if len(frames) > MAX_FRAMES:
        raise ValueError(f"at most {MAX_FRAMES} frames")
    sections = [VIDEO_PREAMBLE]
    if frames:
        sections.append(VIDEO_HEADER)
        for idx, captions in frames:
            sections.append(f"In frame {idx}, following objects were detected"
                            + "".join(f" {c}," for c in captions))
    sections.append(question_prompt(question))
    return " ".join(sections)
