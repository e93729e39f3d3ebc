"""Instruction templates for QA, ranking, and answer judging."""

from __future__ import annotations


class PromptError(Exception):
    pass


QA_TEMPLATE = """You are a careful research assistant. Answer the question below using ONLY documents in @{corpus}.
Do not use online search or any external tools beyond ripgrep and Bash.

Question: {query}

SEARCH STRATEGY (follow exactly):
1. Search directly using ripgrep/Bash --- do NOT use the Agent tool, spawn subagents, or browse the web.
2. Run multiple ripgrep/Bash searches IN PARALLEL within a single response to save time.
3. Use diverse, targeted keywords to maximize recall before drawing conclusions.

INSTRUCTIONS:
- Search @{corpus} thoroughly with multiple relevant keyword combinations.
- Identify and rule out competing candidate answers before committing to one.
- Cite every supporting finding inline using the document's path, e.g. [@{corpus}/relative_path].

Your response MUST follow this exact format:

Explanation: {{{{step-by-step reasoning with inline citations, e.g. [@{corpus}/relative_path]}}}}

Exact Answer: {{{{concise final answer only}}}}

Confidence: {{{{0--100%; use below 50% if evidence is weak, ambiguous, or missing}}}}"""


IR_TEMPLATE = """You are a careful research assistant. Answer the question below using ONLY documents in @{corpus}.
Do not use online search or any external tools beyond Grep and Bash.

Question: {query}

Your search and retrieval must follow the strategy and criteria specified below:

SEARCH STRATEGY (follow exactly):
1. Use Grep/Bash ONLY --- do NOT use the Agent tool, spawn subagents, or browse the web.
2. Run multiple Grep/Bash searches IN PARALLEL within a single response to save time.
3. Use diverse, targeted keywords to maximize recall before drawing conclusions.
4. After each round, reflect on gaps and launch follow-up searches to cover missing angles.
5. Do NOT stop after finding a few documents --- exhaust all plausible search angles.

RETRIEVAL INSTRUCTIONS:
- Both recall AND precision matter equally --- the output is evaluated with NDCG, which penalizes both missing relevant documents and including irrelevant ones.
- Find EVERY document that is genuinely relevant. Missing a gold document hurts recall.
- Read each candidate document carefully before including it. Including an irrelevant document hurts precision.
- A document is relevant only if it directly addresses the question or provides essential supporting evidence for the answer.
- Do NOT include tangential or loosely related documents.

RANKING INSTRUCTIONS:
- Rank the final list by relevance: the most directly useful document for answering the question goes first.
- Ranking quality affects NDCG score.

Your response MUST follow this exact format:

Relevant Documents (ranked by relevance, most relevant first; maximum 20 documents):
1. {corpus}/path/to/doc1.txt
2. {corpus}/path/to/doc2.txt
3. {corpus}/path/to/doc3.txt
(Use full relative paths from the working directory; list at most 20 documents; omit any document that is not directly relevant)

Explanation: {{{{step-by-step reasoning with inline citations, e.g. [{corpus}/relative_path]}}}}

Exact Answer: {{{{concise final answer only}}}}

Confidence: {{{{0% --- 100%; use below 50% if evidence is weak, ambiguous, or missing.}}}}"""


JUDGE_TEMPLATE = """Judge whether the following {{Response}} to the {{Question}} is correct or not based on the precise and unambiguous {{Correct Answer}} below.

Question: {question}

Response: {response}

Your judgement must be in the format and criteria specified below:

Extracted_final_answer: The final exact answer extracted from the {{Response}}. Put the extracted answer as 'None' if there is no exact, final answer to extract from the response.

Correct Answer: {correct_answer}

Reasoning: Explain why the extracted_final_answer is correct or incorrect based on {{Correct Answer}}, focusing only on if there are meaningful differences between {{Correct Answer}} and the extracted_final_answer. Do not comment on any background to the problem, do not attempt to solve the problem, do not argue for any answer different than {{Correct Answer}}, focus only on whether the answers match.

Correct: Answer 'yes' if extracted_final_answer matches the {{Correct Answer}} given above, or is within a small margin of error for numerical problems. Answer 'no' otherwise, i.e. if there is any inconsistency, ambiguity, non-equivalency, or if the extracted answer is incorrect.

Confidence: The extracted confidence score between 0% and 100% from {{Response}}. Put 100 if there is no confidence score available."""


ANSWER_NOW_SUFFIX = (
    "You have reached the session budget. Stop searching and answer now with your "
    "best conclusion, using the required response format. Do not request any more tools."
)


def render_prompt(kind: str, corpus_label: str, query: str) -> str:
    """Fill the QA or IR template; no other template variance exists."""
    if not query:
        raise PromptError("query must be non-empty")
    if kind == "qa":
        return QA_TEMPLATE.format(corpus=corpus_label, query=query)
    if kind == "ir":
        return IR_TEMPLATE.format(corpus=corpus_label, query=query)
    raise PromptError(f"unknown prompt kind: {kind!r} (expected 'qa' or 'ir')")


def render_judge_prompt(question: str, response: str, correct_answer: str) -> str:
    return JUDGE_TEMPLATE.format(
        question=question, response=response, correct_answer=correct_answer
    )
