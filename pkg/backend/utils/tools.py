import types
import inspect
from typing import Any, Literal, Union, get_args, get_origin, get_type_hints

JSON_TYPES = {
    str: "string",
    int: "integer",
    float: "number",
    bool: "boolean",
    list: "array",
    tuple: "array",
    dict: "object",
}


def doc_to_dict(docstring: str) -> dict:
    lines = docstring.split("\n")
    description = lines[1].strip() if len(lines) > 1 else lines[0].strip()
    param_dict = {}

    for line in lines:
        if ":param" in line:
            line = line.replace(":param", "").strip()
            param, desc = line.split(":", 1)
            param_dict[param.strip()] = desc.strip()
    ret_dict = {"description": description, "params": param_dict}
    return ret_dict


def annotation_schema(annotation: Any) -> dict:
    """JSON-schema fragment for a handler parameter annotation."""
    origin = get_origin(annotation)
    if origin in (Union, types.UnionType):
        options = [a for a in get_args(annotation) if a is not type(None)]
        if len(options) == 1:
            return annotation_schema(options[0])
        return {"anyOf": [annotation_schema(a) for a in options]}
    if origin is Literal:
        return {"type": "string", "enum": list(get_args(annotation))}
    if origin in (list, tuple):
        args = get_args(annotation)
        return {"type": "array", **({"items": annotation_schema(args[0])} if args else {})}
    if origin is dict:
        return {"type": "object"}
    if annotation is Any:
        return {}
    return {"type": JSON_TYPES.get(annotation, "object")}


def get_tools_specs(tools: Any) -> list[dict]:
    """
    Specs for every public method of a tools object: the second docstring line
    is the description and `:param name: text` lines describe parameters.
    """
    function_list = [
        {"name": func, "function": getattr(tools, func)}
        for func in dir(tools)
        if callable(getattr(tools, func))
        and not func.startswith("_")
        and not inspect.isclass(getattr(tools, func))
    ]

    specs = []
    for function_item in function_list:
        function_name = function_item["name"]
        function = function_item["function"]
        function_doc = doc_to_dict(function.__doc__ or f"\n{function_name}")
        hints = get_type_hints(function)
        parameters = inspect.signature(function).parameters

        specs.append(
            {
                "name": function_name,
                "description": function_doc.get("description", function_name),
                "parameters": {
                    "type": "object",
                    "properties": {
                        param_name: {
                            **annotation_schema(hints.get(param_name, Any)),
                            "description": function_doc.get("params", {}).get(
                                param_name, param_name
                            ),
                        }
                        for param_name in parameters
                    },
                    "required": [
                        name
                        for name, param in parameters.items()
                        if param.default is param.empty
                    ],
                },
            }
        )

    return specs
